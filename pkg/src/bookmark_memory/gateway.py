"""Role-tagged oracle calls with a persistent response cache.

Every generative or classification call made by the engine, the baselines
and the evaluation harness goes through :class:`Gateway`.  A gateway pairs
a backend (a remote chat-completion endpoint or a deterministic scripted
backend) with an append-only JSON Lines cache keyed on
``(role, model, prompt, temperature)``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

import httpx

log = logging.getLogger(__name__)


class OracleRole(str, Enum):
    PROPOSER = "Proposer"
    RELATION_JUDGE = "RelationJudge"
    DERIVE_INITIALIZER = "DeriveInitializer"
    STATE_TRANSITIONER = "StateTransitioner"
    EVIDENCE_FILTER = "EvidenceFilter"
    BEHAVIOR_SUMMARIZER = "BehaviorSummarizer"
    CONCEPT_SUMMARIZER = "ConceptSummarizer"
    ACTOR = "Actor"
    EM_JUDGE = "EMJudge"
    PROFILE_UPDATER = "ProfileUpdater"

    @classmethod
    def parse(cls, name: str) -> "OracleRole":
        try:
            return cls(name)
        except ValueError:
            raise ConfigError(f"unknown oracle role '{name}'") from None


CLASSIFICATION_ROLES = frozenset(
    {OracleRole.RELATION_JUDGE, OracleRole.EVIDENCE_FILTER, OracleRole.EM_JUDGE}
)


class OracleError(RuntimeError):
    """A backend failed to produce a response."""


class TransientOracleError(OracleError):
    """Network-level failure worth retrying."""


class UnscriptedCallError(OracleError):
    def __init__(self, role: OracleRole, prompt: str):
        self.role = role
        self.prompt_hash = prompt_hash(prompt)
        super().__init__(
            f"unscripted call: role={role.value} prompt_sha256={self.prompt_hash[:16]}"
        )


class ConfigError(ValueError):
    pass


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class OracleRequest:
    role: OracleRole
    prompt: str
    max_output: int = 512
    # None means "use the temperature configured for the role".
    temperature: float | None = None
    # Structured inputs the prompt was rendered from. Scripted rules read these;
    # they never reach a remote backend and are not part of the cache key.
    fields: Mapping[str, Any] = field(default_factory=dict, compare=False, hash=False)


def cache_key(role: OracleRole, model: str, prompt: str, temperature: float) -> str:
    payload = json.dumps([role.value, model, prompt, float(temperature)], ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class CacheRecord:
    key: str
    role: str
    model: str
    response: str
    timestamp: float

    def checksum(self) -> str:
        return hashlib.sha256(f"{self.key}\x00{self.response}".encode("utf-8")).hexdigest()

    def to_json(self) -> str:
        rec = {
            "key": self.key,
            "role": self.role,
            "model": self.model,
            "response": self.response,
            "timestamp": self.timestamp,
            "checksum": self.checksum(),
        }
        return json.dumps(rec, ensure_ascii=False)


class ResponseCache:
    """Append-only JSON Lines cache with per-record checksums.

    Corrupt records (bad JSON or checksum mismatch) are skipped on load and
    counted in ``corrupt``; they never abort loading.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self._index: dict[str, str] = {}
        self._lock = threading.Lock()
        self.corrupt = 0
        self.loaded = 0
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self):
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                rec = _parse_cache_line(line)
                if rec is None:
                    log.warning("cache %s: corrupt record on line %d skipped", self.path, lineno)
                    self.corrupt += 1
                    continue
                self._index[rec.key] = rec.response
                self.loaded += 1

    def get(self, key: str) -> str | None:
        return self._index.get(key)

    def put(self, record: CacheRecord) -> None:
        with self._lock:
            if record.key in self._index:
                return
            self._index[record.key] = record.response
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(record.to_json() + "\n")

    def __len__(self) -> int:
        return len(self._index)


def _parse_cache_line(line: str) -> CacheRecord | None:
    try:
        raw = json.loads(line)
        rec = CacheRecord(
            key=raw["key"],
            role=raw["role"],
            model=raw["model"],
            response=raw["response"],
            timestamp=float(raw["timestamp"]),
        )
    except (ValueError, KeyError, TypeError):
        return None
    if raw.get("checksum") != rec.checksum():
        return None
    return rec


def verify_cache(path: str | Path) -> dict[str, int]:
    """Scan a cache file; returns counts of valid, corrupt and duplicate records."""
    valid = corrupt = duplicates = 0
    seen: set[str] = set()
    roles: Counter[str] = Counter()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = _parse_cache_line(line)
            if rec is None:
                corrupt += 1
                continue
            valid += 1
            roles[rec.role] += 1
            if rec.key in seen:
                duplicates += 1
            seen.add(rec.key)
    return {"valid": valid, "corrupt": corrupt, "duplicates": duplicates, **{f"role:{r}": n for r, n in sorted(roles.items())}}


# -- backends ----------------------------------------------------------------

ScriptRule = Callable[[OracleRequest], str]


@dataclass
class FixtureRecord:
    role: OracleRole
    response: str
    prompt_sha256: str | None = None
    contains: str | None = None

    def matches(self, req: OracleRequest) -> bool:
        if req.role != self.role:
            return False
        if self.prompt_sha256 is not None:
            return prompt_hash(req.prompt) == self.prompt_sha256
        if self.contains is not None:
            return self.contains in req.prompt
        return True


def load_fixtures(directory: str | Path) -> list[FixtureRecord]:
    """Load ``*.jsonl`` fixture files (sorted by name) from a directory.

    Each record: ``{"role": ..., "response": ...}`` plus either
    ``"prompt_sha256"`` (exact prompt) or ``"contains"`` (substring rule).
    A record with neither matches every request of its role.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"fixture directory not found: {directory}")
    out = []
    for path in sorted(directory.glob("*.jsonl")):
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                out.append(
                    FixtureRecord(
                        role=OracleRole.parse(raw["role"]),
                        response=raw["response"],
                        prompt_sha256=raw.get("prompt_sha256"),
                        contains=raw.get("contains"),
                    )
                )
            except (ValueError, KeyError) as exc:
                raise ConfigError(f"{path}:{lineno}: bad fixture record ({exc})") from None
    return out


class ScriptedBackend:
    """Deterministic backend: exact fixtures, then substring fixtures, then rules."""

    name = "scripted"

    def __init__(
        self,
        rules: Mapping[OracleRole, ScriptRule] | None = None,
        fixtures: Iterable[FixtureRecord] = (),
    ):
        self.rules = dict(rules or {})
        fixtures = list(fixtures)
        self.exact = {(f.role, f.prompt_sha256): f.response for f in fixtures if f.prompt_sha256}
        self.loose = [f for f in fixtures if f.prompt_sha256 is None]

    def complete(self, req: OracleRequest, model: str, temperature: float) -> str:
        hit = self.exact.get((req.role, prompt_hash(req.prompt)))
        if hit is not None:
            return hit
        for fx in self.loose:
            if fx.matches(req):
                return fx.response
        rule = self.rules.get(req.role)
        if rule is None:
            raise UnscriptedCallError(req.role, req.prompt)
        return rule(req)


class RemoteBackend:
    """Chat-completion style JSON endpoint."""

    name = "remote"

    def __init__(
        self,
        endpoint: str,
        api_key: str,
        timeout: float = 60.0,
        client: httpx.Client | None = None,
    ):
        self.endpoint = endpoint
        self.api_key = api_key
        self.client = client or httpx.Client(timeout=timeout)

    def complete(self, req: OracleRequest, model: str, temperature: float) -> str:
        body = {
            "model": model,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": temperature,
            "max_tokens": req.max_output,
        }
        headers = {"Authorization": f"Bearer {self.api_key}"}
        try:
            resp = self.client.post(self.endpoint, json=body, headers=headers)
        except httpx.TransportError as exc:
            raise TransientOracleError(f"{type(exc).__name__}: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientOracleError(f"HTTP {resp.status_code}: {resp.text[:500]}")
        if resp.status_code >= 400:
            raise OracleError(f"HTTP {resp.status_code}: {resp.text[:500]}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError):
            raise OracleError(f"unexpected response body: {resp.text[:500]}") from None


# -- gateway -----------------------------------------------------------------


def parse_label(text: str, labels: Iterable[str]) -> str | None:
    """Lenient exact-token parse: trim, case-fold, strip surrounding punctuation."""
    cleaned = text.strip().lower().strip(" \t\n.!?,;:'\"`*()[]")
    return cleaned if cleaned in set(labels) else None


class Gateway:
    def __init__(
        self,
        backend,
        role_models: Mapping[str, str] | None = None,
        role_temperatures: Mapping[str, float] | None = None,
        cache: ResponseCache | None = None,
        attempts: int = 3,
        backoff_ms: float = 500.0,
    ):
        self.backend = backend
        self.role_models = dict(role_models or {"*": getattr(backend, "name", "default")})
        self.role_temperatures = dict(role_temperatures or {})
        self.cache = cache if cache is not None else ResponseCache()
        self.attempts = max(1, int(attempts))
        self.backoff_ms = float(backoff_ms)
        self.calls: Counter[str] = Counter()
        self.backend_calls = 0
        self.cache_hits = 0
        self.parse_warnings = 0
        self._stats_lock = threading.Lock()

    def __deepcopy__(self, memo):
        # A gateway is a shared service; estimator cloning must not fork it.
        return self

    def model_for(self, role: OracleRole) -> str:
        return self.role_models.get(role.value, self.role_models.get("*", "default"))

    def temperature_for(self, role: OracleRole) -> float:
        return float(self.role_temperatures.get(role.value, self.role_temperatures.get("*", 0.0)))

    def call(self, req: OracleRequest) -> str:
        model = self.model_for(req.role)
        temperature = (
            self.temperature_for(req.role) if req.temperature is None else float(req.temperature)
        )
        key = cache_key(req.role, model, req.prompt, temperature)
        with self._stats_lock:
            self.calls[req.role.value] += 1
        cached = self.cache.get(key)
        if cached is not None:
            with self._stats_lock:
                self.cache_hits += 1
            return cached
        response = self._dispatch(req, model, temperature)
        self.cache.put(CacheRecord(key, req.role.value, model, response, time.time()))
        return response

    def _dispatch(self, req: OracleRequest, model: str, temperature: float) -> str:
        for attempt in range(1, self.attempts + 1):
            with self._stats_lock:
                self.backend_calls += 1
            try:
                return self.backend.complete(req, model, temperature)
            except TransientOracleError as exc:
                if attempt == self.attempts:
                    raise OracleError(
                        f"{req.role.value}: failed after {self.attempts} attempts: {exc}"
                    ) from exc
                log.warning("%s attempt %d/%d failed: %s", req.role.value, attempt, self.attempts, exc)
                time.sleep(self.backoff_ms / 1000.0 * 2 ** (attempt - 1))
        raise AssertionError("unreachable")

    def classify(
        self,
        req: OracleRequest,
        labels: tuple[str, ...],
        negative: str,
    ) -> str:
        """Constrained-label call; unparseable output maps to ``negative``."""
        raw = self.call(req)
        label = parse_label(raw, labels)
        if label is None:
            with self._stats_lock:
                self.parse_warnings += 1
            log.warning("%s: unparseable output %r treated as %r", req.role.value, raw[:80], negative)
            return negative
        return label

    def classify_binary(self, req: OracleRequest) -> bool:
        if req.role not in CLASSIFICATION_ROLES:
            raise ValueError(f"{req.role.value} is not a classification role")
        return self.classify(req, ("yes", "no"), "no") == "yes"

    def snapshot_calls(self) -> Counter[str]:
        with self._stats_lock:
            return Counter(self.calls)


# -- configuration -----------------------------------------------------------


def load_kv(path: str | Path) -> dict[str, str]:
    """Read a flat ``key = value`` file. ``#`` starts a comment line."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        out[key] = value.strip()
    return out


_GATEWAY_KEYS = {
    "backend.kind",
    "backend.endpoint",
    "backend.credential_env",
    "backend.fixtures",
    "backend.rules",
    "backend.timeout_s",
    "cache.path",
    "retry.attempts",
    "retry.backoff_ms",
}


def configure(config: str | Path | Mapping[str, str], base_dir: str | Path | None = None) -> Gateway:
    """Build a gateway from a config file (or an already-parsed mapping).

    Relative paths (fixture dir, cache path) resolve against ``base_dir``,
    which defaults to the config file's directory.
    """
    if isinstance(config, Mapping):
        kv = dict(config)
        base = Path(base_dir) if base_dir else Path.cwd()
    else:
        kv = load_kv(config)
        base = Path(base_dir) if base_dir else Path(config).resolve().parent

    role_models: dict[str, str] = {}
    role_temps: dict[str, float] = {}
    for key, value in kv.items():
        if key.startswith("roles."):
            parts = key.split(".")
            if len(parts) != 3 or parts[2] not in ("model", "temperature"):
                raise ConfigError(f"malformed role key '{key}'")
            role = parts[1] if parts[1] == "*" else OracleRole.parse(parts[1]).value
            if parts[2] == "model":
                role_models[role] = value
            else:
                role_temps[role] = _as_float(key, value)
        elif key.split(".")[0] in ("backend", "cache", "retry") and key not in _GATEWAY_KEYS:
            raise ConfigError(f"unknown config key '{key}'")

    for role in CLASSIFICATION_ROLES:
        role_temps.setdefault(role.value, 0.0)

    kind = kv.get("backend.kind")
    if kind == "scripted":
        from .scripted import default_rules

        rules_name = kv.get("backend.rules", "default")
        if rules_name not in ("default", "none"):
            raise ConfigError(f"unknown scripted rule set '{rules_name}'")
        fixtures = []
        if "backend.fixtures" in kv:
            fixtures = load_fixtures(_resolve(base, kv["backend.fixtures"]))
        backend = ScriptedBackend(default_rules() if rules_name == "default" else {}, fixtures)
        role_models.setdefault("*", "scripted")
    elif kind == "remote":
        endpoint = kv.get("backend.endpoint")
        if not endpoint:
            raise ConfigError("remote backend requires backend.endpoint")
        env_name = kv.get("backend.credential_env")
        if not env_name:
            raise ConfigError("remote backend requires backend.credential_env")
        api_key = os.environ.get(env_name)
        if not api_key:
            raise ConfigError(f"credential environment variable '{env_name}' is not set")
        if "*" not in role_models:
            raise ConfigError("remote backend requires roles.*.model")
        timeout = _as_float("backend.timeout_s", kv.get("backend.timeout_s", "60"))
        backend = RemoteBackend(endpoint, api_key, timeout=timeout)
    elif kind is None:
        raise ConfigError("missing backend.kind")
    else:
        raise ConfigError(f"unknown backend.kind '{kind}'")

    cache = ResponseCache(_resolve(base, kv["cache.path"]) if "cache.path" in kv else None)
    return Gateway(
        backend,
        role_models=role_models,
        role_temperatures=role_temps,
        cache=cache,
        attempts=int(_as_float("retry.attempts", kv.get("retry.attempts", "3"))),
        backoff_ms=_as_float("retry.backoff_ms", kv.get("retry.backoff_ms", "500")),
    )


def _resolve(base: Path, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def _as_float(key: str, value: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got '{value}'") from None
