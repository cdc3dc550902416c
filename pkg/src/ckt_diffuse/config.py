"""Run configuration and the artifact hash that stamps every output.

Datasets, checkpoints and bench reports all embed the hash of the
configuration that produced them; downstream stages refuse mismatched
inputs instead of silently mixing incompatible artifacts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields


def canonical_hash(obj) -> str:
    """12-hex-char digest of an object's canonical JSON form."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"),
                      ensure_ascii=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


@dataclass(frozen=True)
class RunConfig:
    """Everything a full dataset -> train -> generate run depends on."""

    seed: int = 0
    t_max: int = 500
    interval: int = 1
    hidden: int = 64
    rounds: int = 4
    t_embed: int = 32
    templates: tuple[str, ...] = ()   # empty means the full library
    supply: float = 1.2
    ibias: float = 10e-6
    dataset: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["templates"] = list(self.templates)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        extra = set(doc) - names
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        doc = dict(doc)
        if "templates" in doc:
            doc["templates"] = tuple(doc["templates"])
        return cls(**doc)

    @property
    def hash(self) -> str:
        return canonical_hash(self.to_dict())
