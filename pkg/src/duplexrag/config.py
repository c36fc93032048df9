"""Run configuration: one TOML file whose sections mirror the modules.

Every key has a default, so an empty file is a valid configuration. Unknown
keys and badly typed values are rejected with the dotted key in the message.
"""

from __future__ import annotations

import copy
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .backends import (
    Backend,
    FaultInjector,
    HttpLLMBackend,
    HttpSearchBackend,
    LatencyModel,
    MockBackend,
    PromptTemplate,
    ScriptedOracle,
)
from .datasynth import AlignmentConfig, SynthConfig
from .engine import EngineConfig
from .refenc import ReferenceEncoder
from .seeding import rng_for
from .timebase import TimeBase
from .tokens import EmbeddingTables

SEED_ENV = "DUPLEXRAG_SEED"
BACKEND_KINDS = ("oracle", "mock", "http_llm", "http_search")

DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "timebase": {"frame_rate_hz": 12.5},
    "tokens": {"dim": 16, "num_codebooks": 8, "text_vocab": 1024, "audio_vocab": 256},
    "engine": {"mode": "simulated", "injection": "additive", "settle_s": 0.5, "max_inflight": 1},
    "backend": {
        "kind": "oracle",
        "endpoint": "",
        "timeout_s": 2.0,
        "timeout_enabled": True,
        "p_error": 0.0,
        "reference": "A short reference note with a few facts for the assistant.",
        "template": "",
        "latency": {"kind": "fixed", "value_s": 0.8, "lo_s": 0.0, "hi_s": 0.0,
                    "edges": [], "masses": [], "csv": ""},
    },
    "refenc": {"ratio": 4, "p_drop": 0.2, "seed": 0},
    "datasynth": {"words_per_second": 3.0, "lead_in_s": 0.5, "response_gap_s": 0.4,
                  "turn_gap_s": 0.5, "trailing_s": 3.0, "p_greeting_drop": 0.3},
    "metrics": {"bins": [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0]},
}

# keys whose value may be an int or a list (histogram bins)
_FLEXIBLE = {"metrics.bins"}


class ConfigError(ValueError):
    """Invalid configuration; the message names the file and the dotted key."""


def _type_ok(default, value) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, list):
        return isinstance(value, list) and all(isinstance(x, (int, float)) and not isinstance(x, bool)
                                               for x in value)
    return isinstance(value, type(default))


def _merge(base: dict, update: dict, prefix: str, source: str) -> None:
    for key, value in update.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"{source}: unknown key {dotted!r}")
        default = base[key]
        if isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{source}: {dotted} must be a table")
            _merge(default, value, dotted + ".", source)
            continue
        if dotted in _FLEXIBLE and isinstance(value, int) and not isinstance(value, bool):
            base[key] = value
            continue
        if not _type_ok(default, value):
            raise ConfigError(f"{source}: {dotted} has type {type(value).__name__}, "
                              f"expected {type(default).__name__}")
        base[key] = float(value) if isinstance(default, float) else value


def parse_override(text: str) -> Dict[str, Any]:
    """Turn ``section.key=value`` into a nested dict; the value is read as TOML, else as a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = (s.strip() for s in text.split("=", 1))
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    out: Dict[str, Any] = {}
    node = out
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


@dataclass
class RunConfig:
    data: Dict[str, Any] = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    source: str = "<defaults>"

    @classmethod
    def load(cls, path: Optional[str] = None, overrides=(), env=None) -> "RunConfig":
        """Defaults, then the file, then ``DUPLEXRAG_SEED``, then ``key=value`` overrides."""
        cfg = cls()
        if path is not None:
            cfg.source = str(path)
            try:
                raw = tomllib.loads(Path(path).read_text(encoding="utf-8"))
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: not valid TOML: {exc}") from exc
            _merge(cfg.data, raw, "", cfg.source)
        env = os.environ if env is None else env
        if env.get(SEED_ENV):
            try:
                cfg.data["seed"] = int(env[SEED_ENV])
            except ValueError:
                raise ConfigError(f"{SEED_ENV}: expected an integer, got {env[SEED_ENV]!r}") from None
        for ov in overrides:
            _merge(cfg.data, parse_override(ov), "", "--set")
        cfg.validate()
        return cfg

    def __getitem__(self, section: str):
        return self.data[section]

    @property
    def seed(self) -> int:
        return self.data["seed"]

    def _fail(self, key: str, msg: str):
        raise ConfigError(f"{self.source}: {key}: {msg}")

    def validate(self) -> None:
        d = self.data
        if d["timebase"]["frame_rate_hz"] <= 0:
            self._fail("timebase.frame_rate_hz", "must be positive")
        for k, v in d["tokens"].items():
            if v <= 0:
                self._fail(f"tokens.{k}", "must be positive")
        try:
            self.engine_config()
        except ValueError as exc:
            self._fail("engine", str(exc))
        b = d["backend"]
        if b["kind"] not in BACKEND_KINDS:
            self._fail("backend.kind", f"must be one of {BACKEND_KINDS}")
        if b["kind"].startswith("http") and not b["endpoint"]:
            self._fail("backend.endpoint", f"required for backend.kind = {b['kind']!r}")
        if b["timeout_s"] < 0:
            self._fail("backend.timeout_s", "must be non-negative")
        if not 0.0 <= b["p_error"] <= 1.0:
            self._fail("backend.p_error", "must lie in [0, 1]")
        lat = b["latency"]
        for key in ("value_s", "lo_s", "hi_s"):
            if lat[key] < 0:
                self._fail(f"backend.latency.{key}", f"latency must be non-negative, got {lat[key]}")
        if not lat["csv"]:
            try:
                self.latency_model()
            except ValueError as exc:
                self._fail("backend.latency", str(exc))
        r = d["refenc"]
        if r["ratio"] < 1:
            self._fail("refenc.ratio", "must be >= 1")
        if not 0.0 <= r["p_drop"] <= 1.0:
            self._fail("refenc.p_drop", "must lie in [0, 1]")
        s = d["datasynth"]
        if s["words_per_second"] <= 0:
            self._fail("datasynth.words_per_second", "must be positive")
        for key in ("lead_in_s", "response_gap_s", "turn_gap_s", "trailing_s"):
            if s[key] < 0:
                self._fail(f"datasynth.{key}", "must be non-negative")
        if not 0.0 <= s["p_greeting_drop"] <= 1.0:
            self._fail("datasynth.p_greeting_drop", "must lie in [0, 1]")
        bins = d["metrics"]["bins"]
        if isinstance(bins, int):
            if bins < 1:
                self._fail("metrics.bins", "bin count must be >= 1")
        elif len(bins) < 2 or any(b2 <= b1 for b1, b2 in zip(bins, bins[1:])):
            self._fail("metrics.bins", "edges must be strictly increasing, at least two")

    # -- builders ---------------------------------------------------------

    def timebase(self) -> TimeBase:
        return TimeBase(self.data["timebase"]["frame_rate_hz"])

    def engine_config(self, keep_inputs: bool = False) -> EngineConfig:
        e = self.data["engine"]
        return EngineConfig(e["mode"], e["injection"], e["settle_s"], e["max_inflight"], keep_inputs)

    def tables(self) -> EmbeddingTables:
        t = self.data["tokens"]
        return EmbeddingTables.random(self.seed, t["dim"], t["num_codebooks"], t["text_vocab"], t["audio_vocab"])

    def encoder(self, tables: EmbeddingTables) -> ReferenceEncoder:
        r = self.data["refenc"]
        return ReferenceEncoder(tables, r["ratio"], r["seed"], tb=self.timebase())

    def alignment_config(self) -> AlignmentConfig:
        s = self.data["datasynth"]
        return AlignmentConfig(s["words_per_second"], s["lead_in_s"], s["response_gap_s"],
                               s["turn_gap_s"], s["trailing_s"])

    def synth_config(self) -> SynthConfig:
        s, t, r = self.data["datasynth"], self.data["tokens"], self.data["refenc"]
        return SynthConfig(s["p_greeting_drop"], r["p_drop"], r["ratio"], self.alignment_config(),
                           t["num_codebooks"], t["audio_vocab"])

    def latency_model(self) -> LatencyModel:
        lat = self.data["backend"]["latency"]
        if lat["csv"]:
            try:
                return LatencyModel.from_csv(lat["csv"], seed=self.seed)
            except OSError as exc:
                raise ConfigError(f"{self.source}: backend.latency.csv: {exc}") from exc
            except ValueError as exc:
                self._fail("backend.latency.csv", str(exc))
        return LatencyModel(lat["kind"], lat["value_s"], lat["lo_s"], lat["hi_s"],
                            tuple(lat["edges"]), tuple(lat["masses"]), self.seed)

    @property
    def timeout_s(self) -> Optional[float]:
        b = self.data["backend"]
        return b["timeout_s"] if b["timeout_enabled"] else None

    def backend(self, script_id: str, references=()) -> Backend:
        """Back end for one conversation, with its own latency and fault streams."""
        b = self.data["backend"]
        kind = b["kind"]
        if kind in ("oracle", "mock"):
            lat_rng = rng_for(self.seed, script_id, "latency")
            if kind == "oracle":
                inner: Backend = ScriptedOracle(references, self.latency_model(), self.timeout_s, lat_rng)
            else:
                inner = MockBackend(b["reference"], self.latency_model(), self.timeout_s, lat_rng)
        elif kind == "http_llm":
            inner = HttpLLMBackend(b["endpoint"], self.prompt_template(), self.timeout_s)
        else:
            inner = HttpSearchBackend(b["endpoint"], self.timeout_s)
        if b["p_error"] > 0:
            return FaultInjector(inner, b["p_error"], rng_for(self.seed, script_id, "fault"))
        return inner

    def prompt_template(self) -> PromptTemplate:
        path = self.data["backend"]["template"]
        if path:
            return PromptTemplate.load(path)
        return load_packaged_prompt("reference_llm")

    def bins(self):
        return self.data["metrics"]["bins"]


def load_packaged_prompt(name: str) -> PromptTemplate:
    from importlib import resources

    text = (resources.files("duplexrag") / "data" / "prompts" / f"{name}.txt").read_text(encoding="utf-8")
    return PromptTemplate(name, text)
