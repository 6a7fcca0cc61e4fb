"""Engine configuration: one sectioned ``key = value`` file.

Defaults:

* ``residual_bits = 1``: one bit per residual dimension.
* ``n_per_shard = 50`` (web-style depth; use 1000 for recall-oriented runs),
  ``top_docs = 1000``.
* ``min_bootstrap_passages = 2000``: no model is trained on fewer passages.
* ``min_bootstrap_docs`` defaults to ``B``.
* K policy ``clamp(round(c_mult * sqrt(n)), k_min, k_max)`` with 16 / 16 / 65536.
* ``nprobe = 4``, ``candidate_factor = 4``: candidate-generation knobs.
* ``max_passage_tokens = 180``, ``max_query_tokens = 64``, ``dim = 64``.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .shard import SearchParams
from .stream import SyntheticStreamSpec, default_birth_times

_SECTIONS = {
    "engine": ("dim", "max_passage_tokens", "passage_overlap", "max_query_tokens"),
    "lifecycle": ("A", "B", "k", "min_bootstrap_passages", "min_bootstrap_docs"),
    "model": ("residual_bits", "c_mult", "k_min", "k_max", "max_training_tokens", "kmeans_iters", "seed"),
    "search": ("nprobe", "candidate_factor", "n_per_shard", "top_docs", "workers"),
    "embedder": ("embedder", "n_concepts", "vocab_per_concept", "noise_scale", "n_topics",
                 "concept_spread", "embedder_seed", "vectors_path", "query_vectors_path"),
}
_INI_NAMES = {"embedder": "kind", "embedder_seed": "seed", "vectors_path": "path",
              "query_vectors_path": "queries_path"}


@dataclass
class LifecycleConfig:
    A: int = 600
    B: int = 100
    min_bootstrap_passages: int = 2000
    min_bootstrap_docs: int | None = None

    def __post_init__(self):
        if self.min_bootstrap_docs is None:
            self.min_bootstrap_docs = self.B
        self.validate()

    @property
    def k(self) -> int:
        return self.A // self.B

    def validate(self) -> None:
        if self.B < 1 or self.A < 1 or self.A % self.B != 0 or self.A // self.B < 2:
            raise ConfigError(f"need A = k*B with k >= 2 (got A={self.A}, B={self.B})")
        if self.min_bootstrap_passages < 0 or self.min_bootstrap_docs < 0:
            raise ConfigError("bootstrap thresholds must be >= 0")


@dataclass
class EngineConfig:
    dim: int = 64
    max_passage_tokens: int = 180
    passage_overlap: int = 0
    max_query_tokens: int = 64
    A: int = 600
    B: int = 100
    k: int | None = None
    min_bootstrap_passages: int = 2000
    min_bootstrap_docs: int | None = None
    residual_bits: int = 1
    c_mult: float = 16.0
    k_min: int = 16
    k_max: int = 65536
    max_training_tokens: int = 16384
    kmeans_iters: int = 10
    seed: int = 0
    nprobe: int = 4
    candidate_factor: int = 4
    n_per_shard: int = 50
    top_docs: int = 1000
    workers: int = 1
    embedder: str = "synthetic"
    n_concepts: int = 24
    vocab_per_concept: int = 64
    noise_scale: float = 0.5
    n_topics: int = 8
    concept_spread: float = 0.3
    embedder_seed: int = 0
    vectors_path: str = ""
    query_vectors_path: str = ""

    def __post_init__(self):
        if self.k is None:
            self.k = self.A // self.B if self.B else 0
        if self.min_bootstrap_docs is None:
            self.min_bootstrap_docs = self.B
        self.validate()

    def validate(self) -> None:
        if self.A != self.k * self.B:
            raise ConfigError(f"A must equal k*B (A={self.A}, k={self.k}, B={self.B})")
        self.lifecycle_config()
        self.model_config().validate()
        self.search_params()
        if self.dim < 1 or self.max_passage_tokens < 1 or self.max_query_tokens < 1:
            raise ConfigError("dim, max_passage_tokens and max_query_tokens must be >= 1")
        if not 0 <= self.passage_overlap < self.max_passage_tokens:
            raise ConfigError("passage_overlap must be in [0, max_passage_tokens)")
        if self.top_docs < 1 or self.workers < 1:
            raise ConfigError("top_docs and workers must be >= 1")
        if self.embedder not in ("synthetic", "file"):
            raise ConfigError(f"unknown embedder kind {self.embedder!r}")

    def lifecycle_config(self) -> LifecycleConfig:
        return LifecycleConfig(self.A, self.B, self.min_bootstrap_passages, self.min_bootstrap_docs)

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.residual_bits, self.c_mult, self.k_min, self.k_max,
                           self.max_training_tokens, self.kmeans_iters, self.seed)

    def search_params(self) -> SearchParams:
        return SearchParams(self.n_per_shard, self.nprobe, self.candidate_factor)

    def replace(self, **changes) -> "EngineConfig":
        if ("A" in changes or "B" in changes) and "k" not in changes:
            changes["k"] = None
        return dataclasses.replace(self, **changes)

    def make_embedder(self, base_dir: str | Path | None = None):
        from .embed import FileEmbedder, SyntheticEmbedder

        if self.embedder == "synthetic":
            return SyntheticEmbedder(
                dim=self.dim, n_concepts=self.n_concepts, vocab_per_concept=self.vocab_per_concept,
                noise_scale=self.noise_scale, n_topics=self.n_topics,
                concept_spread=self.concept_spread, seed=self.embedder_seed,
                max_query_tokens=self.max_query_tokens,
            )
        base = Path(base_dir) if base_dir else Path(".")
        qpath = base / self.query_vectors_path if self.query_vectors_path else None
        emb = FileEmbedder(base / self.vectors_path, qpath, self.max_query_tokens)
        if emb.dim != self.dim:
            raise ConfigError(f"vector file dim {emb.dim} != configured dim {self.dim}")
        return emb

    # -- (de)serialization --------------------------------------------------------

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        for section, names in _SECTIONS.items():
            cp[section] = {_INI_NAMES.get(n, n): str(getattr(self, n)) for n in names}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "EngineConfig":
        cp = configparser.ConfigParser()
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"unparseable config: {exc}") from exc
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for section, names in _SECTIONS.items():
            if section not in cp:
                continue
            by_ini = {_INI_NAMES.get(n, n): n for n in names}
            for key, raw in cp[section].items():
                if key not in by_ini:
                    raise ConfigError(f"unknown key [{section}] {key}")
                name = by_ini[key]
                kw[name] = _coerce(raw, types[name], f"[{section}] {key}")
        for section in cp.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
        return cls(**kw)

    @classmethod
    def load(cls, path: str | Path) -> "EngineConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_ini(text)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_ini(), encoding="utf-8")


def _coerce(raw: str, type_name, where: str):
    t = str(type_name)
    try:
        if raw.strip() in ("None", "") and "None" in t:
            return None
        if t.startswith("int"):
            return int(raw)
        if t == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from exc


# -- synthetic stream spec files ---------------------------------------------------


def load_stream_spec(path: str | Path) -> SyntheticStreamSpec:
    """Read a ``[stream]`` section into a :class:`SyntheticStreamSpec`.

    ``births`` may be ``drift`` (default staggered schedule), ``stationary``
    (every concept born at 0) or an explicit comma-separated list.
    """
    cp = configparser.ConfigParser()
    cp.optionxform = str
    try:
        cp.read_string(Path(path).read_text(encoding="utf-8"))
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read stream spec {path}: {exc}") from exc
    if "stream" not in cp:
        raise ConfigError(f"{path}: missing [stream] section")
    sec = dict(cp["stream"])
    types = {f.name: f.type for f in fields(SyntheticStreamSpec)}
    births = sec.pop("births", "drift").strip()
    sec.pop("concept_birth_times", None)
    kw = {}
    for key, raw in sec.items():
        if key not in types:
            raise ConfigError(f"{path}: unknown stream key {key}")
        kw[key] = _coerce(raw, types[key], f"[stream] {key}")
    n_concepts = kw.get("n_concepts")
    if n_concepts is None or "n_docs" not in kw:
        raise ConfigError(f"{path}: n_docs and n_concepts are required")
    if births == "drift":
        bt = default_birth_times(n_concepts)
    elif births == "stationary":
        bt = tuple([0.0] * n_concepts)
    else:
        try:
            bt = tuple(float(x) for x in births.split(","))
        except ValueError as exc:
            raise ConfigError(f"{path}: bad births list {births!r}") from exc
    spec = SyntheticStreamSpec(concept_birth_times=bt, **kw)
    spec.validate()
    return spec


def write_stream_spec(spec: SyntheticStreamSpec, path: str | Path) -> None:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    vals = {f.name: str(getattr(spec, f.name)) for f in fields(spec) if f.name != "concept_birth_times"}
    vals["births"] = ",".join(repr(float(b)) for b in spec.concept_birth_times)
    cp["stream"] = vals
    with open(path, "w", encoding="utf-8") as fh:
        cp.write(fh)
