"""Use-case definitions and lookup by URL or name."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any, Callable

CONCURRENT = "concurrent"
ITERATIVE = "iterative"
MODES = (CONCURRENT, ITERATIVE)


class RegistryError(Exception):
    pass


class DuplicateName(RegistryError):
    pass


class DuplicateUrl(RegistryError):
    pass


class UnknownUseCase(RegistryError, LookupError):
    pass


class InvalidParams(ValueError):
    pass


class EmptyRange(InvalidParams):
    pass


@dataclass
class SubTask:
    usecase: str
    params: dict[str, Any]
    subtask_id: str
    mode: str = CONCURRENT

    def to_payload(self) -> dict[str, Any]:
        return {
            "usecaseName": self.usecase,
            "params": self.params,
            "subtaskId": self.subtask_id,
            "mode": self.mode,
        }

    @classmethod
    def from_payload(cls, payload: dict[str, Any]) -> "SubTask":
        return cls(
            usecase=payload["usecaseName"],
            params=payload.get("params") or {},
            subtask_id=payload["subtaskId"],
            mode=payload.get("mode", CONCURRENT),
        )


# splitter(query, allocation, mode) -> list[SubTask]; subtask ids are
# assigned later by the front-end, so splitters may leave them blank.
Splitter = Callable[[dict[str, Any], list, str], list[SubTask]]
# handler(params, sink) -> None; sink(record) is called once per output object.
Handler = Callable[[dict[str, Any], Callable[[dict[str, Any]], None]], None]


@dataclass
class UseCase:
    url: str
    name: str
    splitter: Splitter
    handler: Handler
    # query -> estimated number of documents touched; drives the split decision
    estimate: Callable[[dict[str, Any]], int] | None = None
    # raw HTTP query strings -> normalized query; raises InvalidParams
    parse_query: Callable[[dict[str, str]], dict[str, Any]] | None = None
    extra: dict[str, Any] = field(default_factory=dict)


class Registry:
    def __init__(self, usecases=()) -> None:
        self._lock = threading.Lock()
        self._by_name: dict[str, UseCase] = {}
        self._by_url: dict[str, UseCase] = {}
        for uc in usecases:
            self.register(uc)

    def register(self, uc: UseCase) -> None:
        url = _norm_url(uc.url)
        with self._lock:
            if uc.name in self._by_name:
                raise DuplicateName(uc.name)
            if url in self._by_url:
                raise DuplicateUrl(url)
            # copy-on-write so lock-free readers see either old or new maps
            by_name = dict(self._by_name)
            by_url = dict(self._by_url)
            by_name[uc.name] = uc
            by_url[url] = uc
            self._by_name, self._by_url = by_name, by_url

    def lookup_by_name(self, name: str) -> UseCase:
        try:
            return self._by_name[name]
        except KeyError:
            raise UnknownUseCase(name) from None

    def lookup_by_url(self, url: str) -> UseCase:
        try:
            return self._by_url[_norm_url(url)]
        except KeyError:
            raise UnknownUseCase(url) from None

    def names(self) -> list[str]:
        return sorted(self._by_name)

    def __len__(self) -> int:
        return len(self._by_name)


def _norm_url(url: str) -> str:
    return "/" + url.strip("/")
