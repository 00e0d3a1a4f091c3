"""Synthetic multi-domain series, CSV I/O and corpus splitting."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ValidationError
from .rng import CounterRNG
from .spectral import Window, sample_windows

TRAIN_FRACTION_NUM, TRAIN_FRACTION_DEN = 9, 10


@dataclass(frozen=True)
class SyntheticDomainSpec:
    domain_id: str
    components: tuple[tuple[int, float, float], ...] = ()  # (bin, amplitude, phase)
    noise_std: float = 0.0
    trend_slope: float = 0.0
    length: int = 4096

    def validate(self) -> None:
        if self.length < 2:
            raise ValidationError("length must be >= 2")
        if self.noise_std < 0:
            raise ValidationError("noise_std must be >= 0")
        for b, _, _ in self.components:
            if not 0 <= b <= self.length / 2:
                raise ValidationError(f"frequency bin {b} outside [0, {self.length / 2}]")

    def to_json(self) -> dict:
        return {"domain_id": self.domain_id, "components": [list(c) for c in self.components],
                "noise_std": self.noise_std, "trend_slope": self.trend_slope, "length": self.length}

    @classmethod
    def from_json(cls, obj: Mapping) -> "SyntheticDomainSpec":
        return cls(obj["domain_id"], tuple((int(b), float(a), float(p)) for b, a, p in obj.get("components", [])),
                   float(obj.get("noise_std", 0.0)), float(obj.get("trend_slope", 0.0)), int(obj["length"]))


def generate_domain(spec: SyntheticDomainSpec, seed: int = 0) -> np.ndarray:
    spec.validate()
    t = np.arange(spec.length, dtype=np.float64)
    x = spec.trend_slope * t
    for b, amp, phase in spec.components:
        # integer reduction keeps the sine argument exact for long series
        x = x + amp * np.sin(2.0 * np.pi * ((b * np.arange(spec.length)) % spec.length) / spec.length + phase)
    if spec.noise_std > 0:
        x = x + CounterRNG(seed, f"noise/{spec.domain_id}").normal(spec.length, std=spec.noise_std)
    return x


def single_band(domain_id: str, window_bin: int, T: int, periods: int = 32, amplitude: float = 1.0,
                noise_std: float = 0.0, phase: float = 0.0) -> SyntheticDomainSpec:
    """A sinusoid landing exactly on ``window_bin`` of any length-``T`` window."""
    return SyntheticDomainSpec(domain_id, ((window_bin * periods, amplitude, phase),), noise_std, 0.0, T * periods)


def default_presets(T: int = 128, periods: int = 32) -> list[SyntheticDomainSpec]:
    """Three disjoint single-band domains plus a broadband one."""
    bins = [max(1, T // 64), max(2, (T * 5) // 64), max(3, (T * 15) // 64)]
    specs = [single_band(f"band{b}", b, T, periods, noise_std=0.1) for b in bins]
    specs.append(SyntheticDomainSpec("broadband", (), 1.0, 0.0, T * periods))
    return specs


@dataclass
class Corpus:
    domains: dict[str, list[Window]]
    train: dict[str, list[int]] = field(default_factory=dict)
    val: dict[str, list[int]] = field(default_factory=dict)

    def train_windows(self) -> list[Window]:
        return [self.domains[d][i] for d in self.domains for i in self.train[d]]

    def val_windows(self) -> list[Window]:
        return [self.domains[d][i] for d in self.domains for i in self.val[d]]

    def manifest(self) -> dict:
        return {d: {"train": len(self.train[d]), "val": len(self.val[d])} for d in self.domains}

    @property
    def window_length(self) -> int:
        first = next(iter(self.domains.values()))
        return first[0].T


def split_indices(n: int, seed: int, tag: str) -> tuple[list[int], list[int]]:
    perm = CounterRNG(seed, f"split/{tag}").permutation(n)
    n_train = n * TRAIN_FRACTION_NUM // TRAIN_FRACTION_DEN
    return sorted(perm[:n_train].tolist()), sorted(perm[n_train:].tolist())


def corpus_from_windows(domains: Mapping[str, list[Window]], seed: int = 0) -> Corpus:
    corpus = Corpus(dict(domains))
    for d, windows in corpus.domains.items():
        corpus.train[d], corpus.val[d] = split_indices(len(windows), seed, d)
    return corpus


def corpus_from_series(series: Mapping[str, np.ndarray], length: int, windows_per_domain: int,
                       seed: int = 0) -> Corpus:
    domains = {
        d: sample_windows(s, length, windows_per_domain, seed, standardize=False, domain_id=d)
        for d, s in series.items()
    }
    return corpus_from_windows(domains, seed)


def build_corpus(specs: Sequence[SyntheticDomainSpec], T: int, windows_per_domain: int, seed: int = 0,
                 horizon: int = 0) -> Corpus:
    """Generate every domain and sample windows of length ``T + horizon``."""
    if not specs:
        raise ValidationError("need at least one domain spec")
    series = {s.domain_id: generate_domain(s, seed) for s in specs}
    return corpus_from_series(series, T + horizon, windows_per_domain, seed)


def load_csv(path: str | Path) -> dict[str, np.ndarray]:
    """Read ``series_id,value`` rows; rows per id are in temporal order."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        if [h.strip() for h in header] != ["series_id", "value"]:
            raise ValidationError(f"{path}: missing header 'series_id,value'")
        out: dict[str, list[float]] = {}
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != 2:
                raise ValidationError(f"{path}: row {line}: expected 2 fields, got {len(row)}")
            try:
                value = float(row[1])
            except ValueError:
                raise ValidationError(f"{path}: row {line}: non-numeric value {row[1]!r}") from None
            if not math.isfinite(value):
                raise ValidationError(f"{path}: row {line}: non-finite value {row[1]!r}")
            out.setdefault(row[0], []).append(value)
    return {k: np.asarray(v, dtype=np.float64) for k, v in out.items()}


def emit_csv(series: Mapping[str, Iterable[float]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["series_id", "value"])
        for sid, values in series.items():
            for v in values:
                writer.writerow([sid, repr(float(v))])


def write_manifest(corpus: Corpus, path: str | Path) -> None:
    Path(path).write_text(json.dumps(corpus.manifest(), indent=2) + "\n")
