"""Versioned JSON cache of tuned per-head configurations."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List

from .attn_sim import WorkloadSpec
from .errors import InvalidBoundsError, InvalidSpecError
from .latent import LatentBounds, SparseParams
from .optimizer import ErrorBand

CACHE_VERSION = 1
ENTRY_FIELDS = ("layer", "head", "s", "tau", "theta", "lambda", "error", "sparsity",
                "fallback_applied", "evals_low", "evals_high")


@dataclass(frozen=True)
class CacheEntry:
    layer: int
    head: int
    s: float
    tau: float
    theta: float
    lam: float
    error: float
    sparsity: float
    fallback_applied: bool
    evals_low: int
    evals_high: int

    @property
    def params(self) -> SparseParams:
        return SparseParams(self.tau, self.theta, self.lam)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_result(cls, r) -> "CacheEntry":
        p = r.params
        return cls(r.layer, r.head, float(r.s_best), float(p.tau_keep), float(p.theta), float(p.lam),
                   float(r.error), float(r.sparsity), bool(r.fallback_applied), int(r.evals_low), int(r.evals_high))


@dataclass
class ConfigCache:
    model_id: str
    band: ErrorBand
    bounds: LatentBounds
    entries: List[CacheEntry] = field(default_factory=list)
    version: int = CACHE_VERSION

    def entry_map(self) -> Dict[tuple, CacheEntry]:
        return {(e.layer, e.head): e for e in self.entries}

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "model_id": self.model_id,
            "band": {"eps_low": self.band.eps_low, "eps_high": self.band.eps_high},
            "bounds": self.bounds.as_dict(),
            "entries": [e.to_dict() for e in sorted(self.entries, key=lambda e: (e.layer, e.head))],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def from_dict(cls, d: dict) -> "ConfigCache":
        if not isinstance(d, dict):
            raise InvalidSpecError("config cache must be a JSON object")
        if d.get("version") != CACHE_VERSION:
            raise InvalidSpecError(f"unsupported config cache version {d.get('version')!r}")
        try:
            band = ErrorBand(float(d["band"]["eps_low"]), float(d["band"]["eps_high"]))
            bounds = LatentBounds.from_dict(d["bounds"])
            entries = [_parse_entry(e, bounds) for e in d["entries"]]
            model_id = str(d["model_id"])
        except (KeyError, TypeError) as exc:
            raise InvalidSpecError(f"malformed config cache: missing {exc}") from exc
        except ValueError as exc:
            if isinstance(exc, (InvalidBoundsError, InvalidSpecError)):
                raise
            raise InvalidSpecError(f"malformed config cache: {exc}") from exc
        return cls(model_id, band, bounds, entries)

    @classmethod
    def read(cls, path) -> "ConfigCache":
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise InvalidSpecError(f"config cache is not valid JSON: {exc}") from exc
        return cls.from_dict(d)

    @classmethod
    def from_results(cls, results: Iterable, model_id: str, band: ErrorBand, bounds: LatentBounds) -> "ConfigCache":
        return cls(model_id, band, bounds, [CacheEntry.from_result(r) for r in results])


def _parse_entry(d: dict, bounds: LatentBounds) -> CacheEntry:
    if set(d) != set(ENTRY_FIELDS):
        raise InvalidSpecError(f"cache entry fields differ from {ENTRY_FIELDS}")
    e = CacheEntry(int(d["layer"]), int(d["head"]), float(d["s"]), float(d["tau"]), float(d["theta"]),
                   float(d["lambda"]), float(d["error"]), float(d["sparsity"]), bool(d["fallback_applied"]),
                   int(d["evals_low"]), int(d["evals_high"]))
    if not 0.0 <= e.s <= 1.0:
        raise InvalidBoundsError("s", f"{e.s} outside [0, 1]")
    if e.lam > 0:
        raise InvalidBoundsError("lambda", f"{e.lam} > 0 would skip the max tile")
    if not bounds.contains(e.params, tol=1e-9):
        raise InvalidBoundsError("entry", f"params of ({e.layer}, {e.head}) lie outside the bounds box")
    return e


def model_id(spec: WorkloadSpec) -> str:
    """Identifier of the structure a cache was tuned on (seed excluded)."""
    d = spec.to_dict()
    d.pop("seed")
    digest = hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:8]
    return f"synthetic-L{spec.layers}-H{spec.heads}-d{spec.head_dim}-B{spec.block_size}-{digest}"
