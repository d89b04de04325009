"""Seeded sample streams, the JSONL dump format, verification and audits.

Sample ``i`` of task ``t`` under master seed ``s`` is drawn from its own
stream ``rng.generator(s, "data", task_index, i)``, so any record can be
re-derived in isolation.
"""
from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import kernels, rng, synth

FORMAT_VERSION = 1


def sample_at(task: str, seed: int, index: int, stream: str = "data") -> synth.TaskSample:
    """Sample ``index`` of ``task``; held-out sets use ``stream="eval"``."""
    if task not in synth.TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {synth.TASKS}")
    return synth.gen_stage_sample(task, rng.generator(seed, stream, synth.TASKS.index(task), index))


def samples(task: str, seed: int, start: int, count: int, stream: str = "data") -> List[synth.TaskSample]:
    return [sample_at(task, seed, i, stream) for i in range(start, start + count)]


def _arrays(sample: synth.TaskSample) -> Dict[str, np.ndarray]:
    out = {
        "source": sample.source,
        "source_valid": sample.source_valid,
        "target": sample.target,
        "x_target": synth.encode_target(sample),
        "y": synth.encode_condition(sample),
        "h": synth.encode_source(sample),
    }
    if sample.mask is not None:
        out["mask"] = sample.mask.bitmap
        if sample.mask.polygon is not None:
            out["polygon"] = sample.mask.polygon
    if sample.control is not None:
        out["control"] = sample.control
    return out


def _canonical(a: np.ndarray) -> np.ndarray:
    if a.dtype == bool:
        return np.ascontiguousarray(a, dtype=np.uint8)
    return np.ascontiguousarray(a, dtype="<f8")


def arrays_digest(arrays: Dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = _canonical(arrays[name])
        h.update(name.encode())
        h.update(str(a.shape).encode())
        h.update(a.dtype.str.encode())
        h.update(a.tobytes())
    return h.hexdigest()


def _meta_json(meta: dict) -> dict:
    out = {}
    for k, v in meta.items():
        if isinstance(v, np.ndarray):
            continue
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


def encode_record(task: str, seed: int, index: int, sample: synth.TaskSample) -> dict:
    arrays = _arrays(sample)
    enc = {}
    for name, a in arrays.items():
        c = _canonical(a)
        enc[name] = {"dtype": c.dtype.str, "shape": list(c.shape),
                     "data": base64.b64encode(c.tobytes()).decode("ascii")}
    return {
        "version": FORMAT_VERSION, "task": task, "seed": seed, "index": index,
        "meta": _meta_json(sample.meta), "arrays": enc, "sha256": arrays_digest(arrays),
    }


def decode_arrays(record: dict) -> Dict[str, np.ndarray]:
    out = {}
    for name, spec in record["arrays"].items():
        raw = base64.b64decode(spec["data"])
        a = np.frombuffer(raw, dtype=np.dtype(spec["dtype"])).reshape(spec["shape"])
        out[name] = a.astype(bool) if spec["dtype"] == "|u1" else a
    return out


def dump_jsonl(path, task: str, count: int, seed: int, audit: "Optional[MaskAudit]" = None) -> str:
    """Write ``count`` records; returns the sha256 of the file contents."""
    path = Path(path)
    digest = hashlib.sha256()
    with path.open("w", encoding="utf-8") as fh:
        for i in range(count):
            s = sample_at(task, seed, i)
            if audit is not None:
                audit.add(s)
            line = json.dumps(encode_record(task, seed, i, s), sort_keys=True) + "\n"
            digest.update(line.encode())
            fh.write(line)
    return digest.hexdigest()


@dataclass
class VerifyResult:
    ok: bool
    n_records: int
    first_bad: Optional[int] = None  # 0-based line number
    reason: str = ""


def verify_jsonl(path) -> VerifyResult:
    """Re-derive every record from its (task, seed, index) and compare hashes."""
    n = 0
    with Path(path).open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh):
            n += 1
            try:
                rec = json.loads(line)
                stored = decode_arrays(rec)
                task, seed, index = rec["task"], int(rec["seed"]), int(rec["index"])
            except (ValueError, KeyError, TypeError) as exc:
                return VerifyResult(False, n, line_no, f"unparseable record: {exc}")
            if arrays_digest(stored) != rec.get("sha256"):
                return VerifyResult(False, n, line_no, "stored arrays do not match their sha256")
            try:
                fresh = arrays_digest(_arrays(sample_at(task, seed, index)))
            except ValueError as exc:
                return VerifyResult(False, n, line_no, str(exc))
            if fresh != rec["sha256"]:
                return VerifyResult(False, n, line_no, "regenerated sample differs")
    return VerifyResult(True, n)


@dataclass
class MaskAudit:
    """Running statistics over inpainting and grounding samples."""

    kinds: Dict[str, int] = field(default_factory=lambda: {k.value: 0 for k in synth.MaskKind})
    rejected: int = 0
    max_accepted_random_iou: float = 0.0
    random_over_threshold: int = 0
    irregular_bad_vertex_count: int = 0
    irregular_not_simple: int = 0
    irregular_out_of_bounds: int = 0
    object_mask_mismatch: int = 0
    grounding_checked: int = 0
    grounding_bad_support: int = 0

    def add(self, sample: synth.TaskSample) -> None:
        if sample.task == "grounding":
            self.grounding_checked += 1
            diff = np.any(sample.target != sample.source, axis=-1)
            if not np.array_equal(diff, sample.meta["support"]):
                self.grounding_bad_support += 1
            return
        if sample.mask is None:
            return
        m = sample.mask
        self.kinds[m.kind.value] += 1
        self.rejected += sample.meta.get("rejected", 0)
        h, w = m.bitmap.shape
        if m.kind is synth.MaskKind.RANDOM:
            objs = [o.bitmap for o in sample.scene.objects]
            worst = max((synth.iou(m.bitmap, b) for b in objs), default=0.0)
            self.max_accepted_random_iou = max(self.max_accepted_random_iou, worst)
            self.random_over_threshold += worst > synth.IOU_REJECT
        elif m.kind is synth.MaskKind.OBJECT:
            src = sample.scene.objects[m.source_object]
            if not np.array_equal(m.bitmap, src.bitmap):
                self.object_mask_mismatch += 1
        else:
            poly = m.polygon
            if poly is None or poly.shape != (synth.N_POLYGON_POINTS, 2):
                self.irregular_bad_vertex_count += 1
                return
            if not kernels.polygon_is_simple(poly[:, 0], poly[:, 1]):
                self.irregular_not_simple += 1
            if poly.min() < 0 or poly[:, 0].max() > h or poly[:, 1].max() > w:
                self.irregular_out_of_bounds += 1

    @property
    def total(self) -> int:
        return sum(self.kinds.values())

    def fractions(self) -> Dict[str, float]:
        n = max(self.total, 1)
        return {k: v / n for k, v in self.kinds.items()}

    def mixture_tolerance(self, tol: float = 0.01) -> float:
        """``tol``, widened to four binomial standard deviations for small counts."""
        n = max(self.total, 1)
        return max(tol, 4.0 * float(np.sqrt(0.25 / n)))

    def mixture_ok(self, tol: float = 0.01) -> bool:
        f = self.fractions()
        expected = dict(zip((k.value for k in synth.MaskKind), synth.MASK_KIND_PROBS))
        return all(abs(f[k] - expected[k]) <= self.mixture_tolerance(tol) for k in expected)

    def passed(self, tol: float = 0.01) -> bool:
        clean = (self.random_over_threshold == 0 and self.irregular_bad_vertex_count == 0
                 and self.irregular_not_simple == 0 and self.irregular_out_of_bounds == 0
                 and self.object_mask_mismatch == 0 and self.grounding_bad_support == 0)
        return clean and (self.total == 0 or self.mixture_ok(tol))

    def summary(self) -> str:
        lines = []
        if self.total:
            f = self.fractions()
            lines.append("mask kinds: " + ", ".join(f"{k}={f[k]:.4f} ({self.kinds[k]})" for k in f)
                         + f"; target 0.2/0.4/0.4 within {self.mixture_tolerance():.4f}")
            lines.append(f"random masks rejected and resampled: {self.rejected}")
            lines.append(f"max accepted random-mask IoU: {self.max_accepted_random_iou:.4f} "
                         f"(over threshold: {self.random_over_threshold})")
            lines.append(f"irregular polygons: bad vertex count {self.irregular_bad_vertex_count}, "
                         f"not simple {self.irregular_not_simple}, "
                         f"out of bounds {self.irregular_out_of_bounds}")
            lines.append(f"object-shaped mask mismatches: {self.object_mask_mismatch}")
        if self.grounding_checked:
            lines.append(f"grounding records checked: {self.grounding_checked}, "
                         f"bad diff support: {self.grounding_bad_support}")
        lines.append("audit: " + ("PASS" if self.passed() else "FAIL"))
        return "\n".join(lines)


def audit_inpainting(seed: int, count: int) -> MaskAudit:
    audit = MaskAudit()
    for i in range(count):
        audit.add(sample_at("mask_inpainting", seed, i))
    return audit
