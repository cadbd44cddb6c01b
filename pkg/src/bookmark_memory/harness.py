"""Benchmark replay, exact-match judging, efficiency accounting and reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

from . import __version__
from .bank import DEFAULT_K_PRIME, MemoryBank
from .base import RPAEstimator
from .baselines import DEFAULT_RICL_K, ETARPA, RICLRPA, VanillaRPA
from .engine import DEFAULT_CONTEXT_CAP, DEFAULT_K, DEFAULT_NEAR_DISTANCE, BookmarkRPA
from .gateway import ConfigError, Gateway
from .prompts import Oracles
from .storyline import DEFAULT_WINDOW, load_storyline, split_for_character, splittable_characters
from .sync import (
    DEFAULT_BEHAVIOR_WINDOW,
    DEFAULT_CHUNK_SIZE,
    DEFAULT_CONTEXT_RADIUS,
    DEFAULT_EVIDENCE_CAP,
)

log = logging.getLogger(__name__)

METHODS = ("bookmarks", "vanilla", "ricl", "eta")
ABLATIONS = ("derive_off", "reuse_off", "near_off", "ibu")
WARMUP_STEPS = 20


class ResumeError(RuntimeError):
    pass


@dataclass(frozen=True)
class RunConfig:
    storyline: str
    characters: tuple[str, ...] = ()
    method: str = "bookmarks"
    ablation: tuple[str, ...] = ()
    artifact: str = ""
    k: int = DEFAULT_K
    k_prime: int = DEFAULT_K_PRIME
    window: int = DEFAULT_WINDOW
    near_distance: int = DEFAULT_NEAR_DISTANCE
    chunk_size: int = DEFAULT_CHUNK_SIZE
    context_radius: int = DEFAULT_CONTEXT_RADIUS
    behavior_window: int = DEFAULT_BEHAVIOR_WINDOW
    evidence_cap: int = DEFAULT_EVIDENCE_CAP
    context_cap: int = DEFAULT_CONTEXT_CAP
    ricl_k: int = DEFAULT_RICL_K
    shared_bank: bool = False
    seed: int = 0
    # Directory relative storyline paths resolve against; not part of the config identity.
    base_dir: str = field(default="", compare=False)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method '{self.method}' (choose from {', '.join(METHODS)})")
        object.__setattr__(self, "ablation", tuple(sorted(set(self.ablation))))
        for flag in self.ablation:
            if flag not in ABLATIONS:
                raise ConfigError(f"unknown ablation flag '{flag}'")
        if self.ablation and self.method != "bookmarks":
            raise ConfigError("ablation flags apply to method=bookmarks only")
        if not self.artifact:
            object.__setattr__(self, "artifact", Path(self.storyline).stem)

    @property
    def storyline_path(self) -> Path:
        p = Path(self.storyline)
        return p if p.is_absolute() or not self.base_dir else Path(self.base_dir) / p

    def to_dict(self) -> dict:
        d = asdict(self)
        del d["base_dir"]
        d["characters"] = list(self.characters)
        d["ablation"] = list(self.ablation)
        return d

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_kv(cls, kv: Mapping[str, str], base_dir: str | Path | None = None) -> "RunConfig":
        """Build from ``run.*``, ``engine.*`` and ``ricl.*`` keys of a flat config."""
        ints = {
            "engine.k": "k",
            "engine.k_prime": "k_prime",
            "engine.window": "window",
            "engine.near_distance": "near_distance",
            "engine.chunk_size": "chunk_size",
            "engine.context_radius": "context_radius",
            "engine.behavior_window": "behavior_window",
            "engine.evidence_cap": "evidence_cap",
            "engine.context_cap": "context_cap",
            "ricl.k": "ricl_k",
            "run.seed": "seed",
        }
        known = set(ints) | {"run.storyline", "run.characters", "run.method", "run.ablation", "run.artifact", "run.shared_bank"}
        for key in kv:
            if key.split(".")[0] in ("run", "engine", "ricl") and key not in known:
                raise ConfigError(f"unknown config key '{key}'")
        if "run.storyline" not in kv:
            raise ConfigError("missing run.storyline")
        kwargs: dict = {
            "storyline": kv["run.storyline"],
            "base_dir": str(base_dir) if base_dir is not None else "",
            "characters": _split_list(kv.get("run.characters", "")),
            "method": kv.get("run.method", "bookmarks"),
            "ablation": _split_list(kv.get("run.ablation", "")),
            "artifact": kv.get("run.artifact", ""),
            "shared_bank": kv.get("run.shared_bank", "false").lower() in ("1", "true", "yes"),
        }
        for key, name in ints.items():
            if key in kv:
                try:
                    kwargs[name] = int(kv[key])
                except ValueError:
                    raise ConfigError(f"{key}: expected an integer, got '{kv[key]}'") from None
        return cls(**kwargs)


def _split_list(value: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in value.split(",") if v.strip())


def make_estimator(cfg: RunConfig, gateway: Gateway, bank: MemoryBank | None = None) -> RPAEstimator:
    if cfg.method == "vanilla":
        return VanillaRPA(gateway, window=cfg.window)
    if cfg.method == "ricl":
        return RICLRPA(gateway, window=cfg.window, k=cfg.ricl_k)
    if cfg.method == "eta":
        return ETARPA(gateway, window=cfg.window)
    flags = set(cfg.ablation)
    return BookmarkRPA(
        gateway,
        k=cfg.k,
        k_prime=cfg.k_prime,
        window=cfg.window,
        near_distance=cfg.near_distance,
        chunk_size=cfg.chunk_size,
        context_radius=cfg.context_radius,
        behavior_window=cfg.behavior_window,
        evidence_cap=cfg.evidence_cap,
        context_cap=cfg.context_cap,
        reuse="reuse_off" not in flags,
        derive="derive_off" not in flags and "reuse_off" not in flags,
        near_notes="near_off" not in flags,
        incremental_behavior="ibu" in flags,
        bank=bank,
    )


# -- judging and metrics -----------------------------------------------------


def judge_em(predicted: str, reference: str, oracle: Oracles) -> bool:
    if not predicted or not reference:
        raise ValueError("EM judging needs non-empty predicted and reference actions")
    return oracle.judge_em(predicted, reference)


def _resolved(traces: Iterable[dict]):
    for t in traces:
        for p in t.get("proposals", []):
            if p["outcome"] in ("reuse", "derive", "create"):
                yield t, p


def compute_efficiency(traces: Iterable[dict]) -> tuple[float | None, float | None]:
    """``(hit_rate, saved_fraction)`` over resolved proposals; ``None`` when there are none.

    hit_rate = (reuse + derive) / proposals;
    saved_fraction = 1 - sum(processed) / sum(index - 1).
    """
    n = hits = processed = scratch = 0
    for t, p in _resolved(traces):
        n += 1
        hits += p["outcome"] in ("reuse", "derive")
        processed += p["processed"]
        scratch += t["index"] - 1
    if n == 0:
        return None, None
    saved = 1.0 - processed / scratch if scratch else 0.0
    return hits / n, saved


@dataclass
class CharacterReport:
    character: str
    n_steps: int = 0
    n_judged: int = 0
    n_correct: int = 0
    n_excluded: int = 0
    n_errors: int = 0
    n_fallback: int = 0
    em_rate: float | None = None
    proposals: int = 0
    proposal_errors: int = 0
    reuse_rate: float | None = None
    derive_rate: float | None = None
    create_rate: float | None = None
    hit_rate: float | None = None
    saved_fraction: float | None = None
    oracle_calls: dict[str, int] = field(default_factory=dict)

    @property
    def oracle_calls_total(self) -> int:
        return sum(self.oracle_calls.values())


def summarize(character: str, traces: list[dict]) -> CharacterReport:
    r = CharacterReport(character)
    counts = {"reuse": 0, "derive": 0, "create": 0}
    calls: dict[str, int] = {}
    for t in traces:
        r.n_steps += 1
        r.n_fallback += bool(t.get("fallback"))
        if t.get("error"):
            r.n_errors += 1
        if t.get("em") is None:
            r.n_excluded += 1
        else:
            r.n_judged += 1
            r.n_correct += bool(t["em"])
        for p in t.get("proposals", []):
            r.proposals += 1
            if p["outcome"] in counts:
                counts[p["outcome"]] += 1
            else:
                r.proposal_errors += 1
        for role, n in t.get("oracle_calls", {}).items():
            calls[role] = calls.get(role, 0) + n
    r.oracle_calls = dict(sorted(calls.items()))
    if r.n_judged:
        r.em_rate = r.n_correct / r.n_judged
    resolved = sum(counts.values())
    if resolved:
        r.reuse_rate = counts["reuse"] / resolved
        r.derive_rate = counts["derive"] / resolved
        r.create_rate = counts["create"] / resolved
    r.hit_rate, r.saved_fraction = compute_efficiency(traces)
    return r


@dataclass
class RunReport:
    method: str
    artifact: str
    config_hash: str
    engine_version: str
    ablation: list[str]
    characters: list[CharacterReport]
    aggregate: CharacterReport | None
    # Wall-clock seconds; kept out of the serialized report so reports stay byte-stable.
    runtime_s: float | None = None

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "artifact": self.artifact,
            "config_hash": self.config_hash,
            "engine_version": self.engine_version,
            "ablation": list(self.ablation),
            "characters": [asdict(c) for c in self.characters],
            "aggregate": asdict(self.aggregate) if self.aggregate else None,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "RunReport":
        return cls(
            method=raw["method"],
            artifact=raw["artifact"],
            config_hash=raw["config_hash"],
            engine_version=raw["engine_version"],
            ablation=list(raw["ablation"]),
            characters=[CharacterReport(**c) for c in raw["characters"]],
            aggregate=CharacterReport(**raw["aggregate"]) if raw["aggregate"] else None,
        )


def build_report(traces: list[dict], *, method: str = "", artifact: str = "", config_hash: str = "",
                 ablation: Iterable[str] = ()) -> RunReport:
    """Aggregate trace records; header fields default to those found in the traces."""
    if traces:
        first = traces[0]
        method = method or first.get("method", "")
        artifact = artifact or first.get("artifact", "")
        config_hash = config_hash or first.get("config_hash", "")
        ablation = ablation or first.get("ablation", [])
    by_char: dict[str, list[dict]] = {}
    for t in traces:
        by_char.setdefault(t["character"], []).append(t)
    chars = [summarize(c, ts) for c, ts in by_char.items()]
    aggregate = summarize("ALL", traces) if traces else None
    return RunReport(method, artifact, config_hash, __version__, sorted(ablation), chars, aggregate)


CSV_COLUMNS = (
    "method", "artifact", "character", "em_rate", "n_judged", "n_excluded",
    "hit_rate", "reuse_rate", "derive_rate", "saved_fraction", "oracle_calls_total",
)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def report_csv(report: RunReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    rows = list(report.characters)
    if report.aggregate is not None and rows:
        rows.append(report.aggregate)
    for c in rows:
        w.writerow([
            report.method, report.artifact, c.character, _fmt(c.em_rate), c.n_judged, c.n_excluded,
            _fmt(c.hit_rate), _fmt(c.reuse_rate), _fmt(c.derive_rate), _fmt(c.saved_fraction),
            c.oracle_calls_total,
        ])
    return buf.getvalue()


def report_json(report: RunReport) -> str:
    return json.dumps(report.to_dict(), indent=2, ensure_ascii=False) + "\n"


def write_report(report: RunReport, path: str | Path, format: str = "json") -> Path:
    path = Path(path)
    if format == "json":
        path.write_text(report_json(report), encoding="utf-8")
    elif format == "csv":
        path.write_text(report_csv(report), encoding="utf-8")
    else:
        raise ValueError(f"unknown report format '{format}'")
    return path


def check_invariants(traces: list[dict], report: RunReport) -> list[str]:
    """Internal-consistency checks on a finished run; returns failure messages."""
    failures = []
    rows = list(report.characters) + ([report.aggregate] if report.aggregate else [])
    for r in rows:
        for name in ("em_rate", "reuse_rate", "derive_rate", "create_rate", "hit_rate", "saved_fraction"):
            v = getattr(r, name)
            if v is not None and not 0.0 <= v <= 1.0:
                failures.append(f"{r.character}: {name}={v} outside [0, 1]")
        if r.reuse_rate is not None:
            total = r.reuse_rate + r.derive_rate + r.create_rate
            if abs(total - 1.0) > 1e-9:
                failures.append(f"{r.character}: outcome rates sum to {total}")
    if report.aggregate is not None:
        hit, saved = compute_efficiency(traces)
        if (hit, saved) != (report.aggregate.hit_rate, report.aggregate.saved_fraction):
            failures.append("efficiency recomputed from traces differs from the report")
    for t in traces:
        for p in t.get("proposals", []):
            if p["outcome"] in ("reuse", "derive", "create") and p["processed"] != t["index"] - 1 - p["p_before"]:
                failures.append(f"step {t['index']}: processed count disagrees with sync points")
    return failures


# -- replay ------------------------------------------------------------------


def read_traces(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def _write_json_atomic(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, ensure_ascii=False, sort_keys=True), encoding="utf-8")
    tmp.replace(path)


def _state_name(character: str) -> str:
    return hashlib.sha256(character.encode("utf-8")).hexdigest()[:16] + ".json"


def replay(
    cfg: RunConfig,
    gateway: Gateway,
    out_dir: str | Path | None = None,
    on_step: Callable[[str, int], None] | None = None,
) -> tuple[list[dict], RunReport]:
    """Replay every test index of every selected character, judging each prediction.

    With ``out_dir`` the run writes ``traces.jsonl`` and per-character state
    after every step and resumes from them when re-run with the same config.
    """
    t0 = time.perf_counter()
    story = load_storyline(cfg.storyline_path)
    characters = list(cfg.characters) or splittable_characters(story)
    chash = cfg.config_hash()
    oracles = Oracles(gateway)

    traces_path = state_dir = None
    done: dict[str, list[dict]] = {}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        traces_path = out / "traces.jsonl"
        state_dir = out / "state"
        state_dir.mkdir(exist_ok=True)
        existing = read_traces(traces_path)
        for t in existing:
            if t.get("config_hash") != chash:
                raise ResumeError(
                    f"{traces_path} was written by config {t.get('config_hash')}, not {chash}"
                )
        if existing and cfg.shared_bank:
            raise ResumeError("shared-bank runs cannot be resumed")
        # Keep only steps covered by saved state; later lines are re-run.
        kept = []
        for t in existing:
            state_file = state_dir / _state_name(t["character"])
            last = json.loads(state_file.read_text())["last_index"] if state_file.exists() else 0
            if t["index"] <= last:
                kept.append(t)
                done.setdefault(t["character"], []).append(t)
        if len(kept) != len(existing):
            traces_path.write_text("".join(json.dumps(t, ensure_ascii=False) + "\n" for t in kept), encoding="utf-8")

    shared = MemoryBank() if cfg.shared_bank and cfg.method == "bookmarks" else None
    all_traces: list[dict] = []
    for character in characters:
        split = split_for_character(story, character)
        est = make_estimator(cfg, gateway, bank=shared).fit(story, character)
        completed = done.get(split.character, [])
        if completed and state_dir is not None:
            est.load_state(json.loads((state_dir / _state_name(split.character)).read_text()))
        all_traces.extend(completed)
        finished = {t["index"] for t in completed}
        for i in split.test_indices:
            if i in finished:
                continue
            if on_step is not None:
                on_step(split.character, i)
            record = _run_step(est, i, story[i].text, oracles, gateway, cfg, chash)
            all_traces.append(record)
            if traces_path is not None:
                with open(traces_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record, ensure_ascii=False) + "\n")
                _write_json_atomic(state_dir / _state_name(split.character), est.state_dict())

    report = build_report(all_traces, method=cfg.method, artifact=cfg.artifact, config_hash=chash,
                          ablation=cfg.ablation)
    report.runtime_s = time.perf_counter() - t0
    return all_traces, report


def _run_step(est: RPAEstimator, i: int, reference: str, oracles: Oracles, gateway: Gateway,
              cfg: RunConfig, chash: str) -> dict:
    trace = est.step(i)
    em = None
    if trace.predicted:
        before = gateway.snapshot_calls()
        try:
            em = judge_em(trace.predicted, reference, oracles)
        except Exception as exc:
            log.warning("EM judge failed at step %d: %s", i, exc)
            trace.error = trace.error or f"judge: {type(exc).__name__}: {exc}"
        for role, n in (gateway.snapshot_calls() - before).items():
            trace.oracle_calls[role] = trace.oracle_calls.get(role, 0) + n
    record = {
        "config_hash": chash,
        "method": cfg.method,
        "artifact": cfg.artifact,
        "ablation": list(cfg.ablation),
        **trace.to_dict(),
        "reference": reference,
        "em": em,
    }
    return record


def write_run_outputs(out_dir: str | Path, cfg: RunConfig, report: RunReport) -> None:
    """Write report.json, report.csv and run.json (provenance and runtime)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_report(report, out / "report.json", "json")
    write_report(report, out / "report.csv", "csv")
    meta = {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "engine_version": __version__,
        "runtime_s": report.runtime_s,
    }
    (out / "run.json").write_text(json.dumps(meta, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")

