"""Knowledge providers: synthetic oracle, on-disk cache, HTTP teacher.

All three answer the same question — "given this sample, produce an
entity-annotated description with at most N knowledge items" — behind
one augment() interface, so datasets can be built offline (oracle,
cache) or against a live teacher service (HTTP). Teacher output is
validated against the markup grammar and lightly repaired before a
request counts as failed.
"""

from __future__ import annotations

import base64
import hashlib
import json
import struct
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass, replace

import numpy as np

from . import fsio
from . import knowledge_format as kf
from .dataset import KnowledgeBase, build_oracle_augmentation, write_pgm


class ProviderError(Exception):
    pass


class TransportError(ProviderError):
    """Connection-level failure that persisted through retries."""


class HttpStatusError(ProviderError):
    """Teacher answered with an HTTP error status; not retried."""

    def __init__(self, message: str, status: int):
        super().__init__(message)
        self.status = status


class MalformedTeacherOutput(ProviderError):
    """Teacher output failed to parse even after repair and one re-request."""


class CacheMissError(ProviderError):
    """Read-only cache has no entry for the request."""


@dataclass(frozen=True)
class ProviderRequest:
    id: str
    text: str
    image: np.ndarray | None
    max_items: int

    def __post_init__(self):
        if self.max_items < 0:
            raise ValueError("max_items must be non-negative")


@dataclass
class ProviderResponse:
    aug_text: kf.AugmentedText
    provider_name: str
    cached: bool = False


def _finalize(t: kf.AugmentedText, req: ProviderRequest, name: str,
              cached: bool) -> ProviderResponse:
    t = kf.truncate_to_n(t, req.max_items)
    if t.warnings:
        raise MalformedTeacherOutput(
            f"sample {req.id}: augmentation carries warnings: {t.warnings[0]}"
        )
    return ProviderResponse(aug_text=t, provider_name=name, cached=cached)


class OracleProvider:
    """Ground-truth knowledge straight from the synthetic knowledge base."""

    def __init__(self, kb: KnowledgeBase):
        self.kb = kb
        self.name = "oracle"

    def augment(self, req: ProviderRequest) -> ProviderResponse:
        return _finalize(build_oracle_augmentation(req.text, self.kb), req,
                         self.name, cached=False)


def cache_key(req: ProviderRequest) -> str:
    """sha256 over length-prefixed request fields; image hashed as PGM bytes."""
    h = hashlib.sha256()
    parts = (
        req.id.encode("utf-8"),
        req.text.encode("utf-8"),
        write_pgm(req.image) if req.image is not None else b"",
        str(req.max_items).encode("ascii"),
    )
    for part in parts:
        h.update(struct.pack("<Q", len(part)))
        h.update(part)
    return h.hexdigest()


class CacheProvider:
    """Append-only JSONL cache of augmentations, optionally backed by
    another provider that fills misses. Replay is last-write-wins per
    key, so re-running a fill simply supersedes older entries."""

    def __init__(self, path: str, base=None):
        self.path = path
        self.base = base
        self.name = f"cache({base.name})" if base is not None else "cache"
        self._lock = threading.Lock()
        self._entries: dict[str, str] = {}
        try:
            rows = fsio.read_jsonl(path)
        except FileNotFoundError:
            rows = []
        for row in rows:
            self._entries[row["key"]] = row["aug_text"]

    def augment(self, req: ProviderRequest) -> ProviderResponse:
        key = cache_key(req)
        with self._lock:
            hit = self._entries.get(key)
        if hit is not None:
            return _finalize(kf.parse(hit), req, self.name, cached=True)
        if self.base is None:
            raise CacheMissError(f"sample {req.id}: no cache entry and no backing provider")
        resp = self.base.augment(req)
        serialized = kf.serialize(resp.aug_text)
        with self._lock:
            self._entries[key] = serialized
            line = json.dumps({"key": key, "aug_text": serialized}, ensure_ascii=False)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
        return ProviderResponse(aug_text=resp.aug_text, provider_name=self.name,
                                cached=False)


class HttpTeacherProvider:
    """Client for the teacher service: POST /augment with
    {id, text, image_b64, max_items}, expecting {"aug_text": ...}.

    Transport failures are retried up to max_retries times; HTTP error
    statuses are not. Unparseable output is repaired once, re-requested
    once, repaired again, then reported as malformed."""

    def __init__(self, base_url: str, timeout: float = 10.0, max_retries: int = 2,
                 max_inflight: int = 4):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.max_retries = max_retries
        self.name = f"http:{self.base_url}"
        self._slots = threading.BoundedSemaphore(max_inflight)

    def _post_augment(self, req: ProviderRequest) -> str:
        body = json.dumps({
            "id": req.id,
            "text": req.text,
            "image_b64": (base64.b64encode(write_pgm(req.image)).decode("ascii")
                          if req.image is not None else ""),
            "max_items": req.max_items,
        }).encode("utf-8")
        http_req = urllib.request.Request(
            self.base_url + "/augment", data=body,
            headers={"Content-Type": "application/json"}, method="POST",
        )
        last_exc = None
        for _ in range(self.max_retries + 1):
            try:
                with self._slots:
                    with urllib.request.urlopen(http_req, timeout=self.timeout) as resp:
                        payload = json.loads(resp.read().decode("utf-8"))
            except urllib.error.HTTPError as exc:
                try:
                    detail = json.loads(exc.read().decode("utf-8")).get("error", "")
                except Exception:
                    detail = ""
                raise HttpStatusError(
                    f"sample {req.id}: teacher returned {exc.code}: {detail}", exc.code
                ) from exc
            except (urllib.error.URLError, ConnectionError, TimeoutError, OSError) as exc:
                last_exc = exc
                continue
            if "aug_text" not in payload:
                raise MalformedTeacherOutput(
                    f"sample {req.id}: teacher response lacks aug_text"
                )
            return payload["aug_text"]
        raise TransportError(
            f"sample {req.id}: teacher unreachable after {self.max_retries + 1} attempts: {last_exc}"
        ) from last_exc

    @staticmethod
    def _try_parse(raw: str) -> kf.AugmentedText | None:
        try:
            t = kf.parse(raw)
        except kf.ParseError:
            return None
        return t if not t.warnings else None

    def augment(self, req: ProviderRequest) -> ProviderResponse:
        raw = self._post_augment(req)
        for attempt in (0, 1):
            t = self._try_parse(raw)
            if t is None:
                t = self._try_parse(kf.strip_orphan_brackets(raw))
            if t is not None:
                return _finalize(t, req, self.name, cached=False)
            if attempt == 0:
                raw = self._post_augment(req)
        raise MalformedTeacherOutput(
            f"sample {req.id}: teacher output failed to parse after repair and re-request"
        )

    def healthcheck(self) -> bool:
        try:
            with urllib.request.urlopen(self.base_url + "/health", timeout=self.timeout):
                return True
        except Exception:
            return False


class AugmentFailureRateError(ProviderError):
    def __init__(self, message: str, failures: list):
        super().__init__(message)
        self.failures = failures


def build_augmented_dataset(samples, provider, n: int,
                            fmt: str = kf.INLINE,
                            failure_threshold: float = 0.05):
    """Fill aug_text on every sample via the provider.

    Returns (new samples, manifest). Individual failures leave that
    sample's aug_text unset and are listed in the manifest; a failure
    rate above failure_threshold raises AugmentFailureRateError.
    """
    kf._check_format(fmt)
    if n < 0:
        raise ValueError("n must be non-negative")
    out, failures = [], []
    for s in samples:
        req = ProviderRequest(id=s.id, text=s.text, image=s.image, max_items=n)
        try:
            resp = provider.augment(req)
        except ProviderError as exc:
            failures.append((s.id, exc))
            out.append(replace(s, aug_text=None))
            continue
        out.append(replace(s, aug_text=kf.serialize(resp.aug_text, fmt)))
    rate = len(failures) / len(samples) if samples else 0.0
    manifest = {
        "provider_name": provider.name,
        "n": n,
        "format": fmt,
        "n_samples": len(samples),
        "failed_ids": [fid for fid, _ in failures],
        "failure_rate": rate,
    }
    if rate > failure_threshold:
        raise AugmentFailureRateError(
            f"{len(failures)}/{len(samples)} augmentations failed "
            f"(rate {rate:.3f} > threshold {failure_threshold})",
            failures,
        )
    return out, manifest
