"""Fast dual-route checks run by ``sdnc selftest``.

Each check compares a production routine against an independent, slower
route on small random instances. The full oracle and property suites live in
the repository's ``tests/`` directory; these are the subset cheap enough to
run from an installed package.
"""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .augmentation import sample_orthogonal
from .baseline import jacobi_eigh
from .core import EmbeddingSequence, TimeInterval
from .metrics import DerConfig, cpwer, der, wer
from .model import DecodePlan, SdncConfig, SdncModel, canonicalize
from .nn.gradcheck import grad_check
from .synth import rng_for


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def _levenshtein_rec(a: tuple, b: tuple) -> int:
    @functools.lru_cache(maxsize=None)
    def go(i: int, j: int) -> int:
        if i == len(a):
            return len(b) - j
        if j == len(b):
            return len(a) - i
        return min(go(i + 1, j) + 1, go(i, j + 1) + 1, go(i + 1, j + 1) + (a[i] != b[j]))

    return go(0, 0)


def check_wer() -> CheckResult:
    rng = rng_for("selftest", "wer")
    for _ in range(200):
        a = tuple(rng.choice(list("abc"), size=rng.integers(0, 7)))
        b = tuple(rng.choice(list("abc"), size=rng.integers(0, 7)))
        if wer(a, b).errors != _levenshtein_rec(a, b):
            return CheckResult("wer", False, f"mismatch on {a} vs {b}")
    return CheckResult("wer", True, "200 instances agree with recursive edit distance")


def check_cpwer() -> CheckResult:
    rng = rng_for("selftest", "cpwer")
    for _ in range(100):
        n_ref, n_hyp = rng.integers(1, 5), rng.integers(1, 5)
        ref = {f"s{i}": list(rng.choice(list("abcd"), size=rng.integers(0, 6))) for i in range(n_ref)}
        hyp = {j: list(rng.choice(list("abcd"), size=rng.integers(0, 6))) for j in range(n_hyp)}
        refs = list(ref.values()) + [[]] * max(0, n_hyp - n_ref)
        hyps = list(hyp.values()) + [[]] * max(0, n_ref - n_hyp)
        brute = min(
            sum(_levenshtein_rec(tuple(refs[i]), tuple(hyps[p[i]])) for i in range(len(refs)))
            for p in itertools.permutations(range(len(hyps)))
        )
        if cpwer(ref, hyp).errors != brute:
            return CheckResult("cpwer", False, f"mismatch: {ref} / {hyp}")
    return CheckResult("cpwer", True, "100 instances agree with factorial search")


def check_der() -> CheckResult:
    # two speakers, no collar: DER from interval arithmetic
    ref = [("a", TimeInterval(0.0, 2.0)), ("b", TimeInterval(2.0, 4.0))]
    hyp = [("x", TimeInterval(0.0, 2.5)), ("y", TimeInterval(2.5, 4.0))]
    r = der(ref, hyp, DerConfig(collar=0.0))
    ok = math.isclose(r.der, 0.5 / 4.0, abs_tol=2e-3)
    return CheckResult("der", ok, f"DER {r.der:.4f} vs interval value 0.1250")


def check_jacobi() -> CheckResult:
    rng = rng_for("selftest", "jacobi")
    worst = 0.0
    for n in (2, 5, 12, 31):
        x = rng.standard_normal((n, n))
        a = x + x.T
        w, v = jacobi_eigh(a)
        worst = max(worst, float(np.abs(w - np.linalg.eigvalsh(a)).max()), float(np.abs(a @ v - v * w).max()))
    return CheckResult("jacobi_eigh", worst < 1e-9, f"worst deviation {worst:.2e} from LAPACK / residual")


def check_orthogonal() -> CheckResult:
    worst = max(float(np.abs(q.entries.T @ q.entries - np.eye(16)).max()) for q in (sample_orthogonal(16, s) for s in range(20)))
    return CheckResult("haar_rotation", worst <= 1e-6, f"max |Q^T Q - I| = {worst:.2e}")


def _tiny_model() -> tuple[SdncModel, EmbeddingSequence, DecodePlan]:
    cfg = SdncConfig(input_dim=4, dim_model=8, num_heads=2, enc_layers=1, dec_layers=1, ffn_dim=16, max_clusters=3, label_smoothing=0.1)
    model = SdncModel(cfg, seed=3, dtype=np.float64)
    rng = rng_for("selftest", "tiny")
    seg = np.array([1, 1, 2, 2, 2, 3])
    iv = np.stack([np.arange(6.0), np.arange(6.0) + 1.0], axis=1)
    seq = EmbeddingSequence("tiny", seg, iv, rng.standard_normal((6, 4)))
    return model, seq, DecodePlan([1, 2, 3], [1, 2, 1])


def check_gradients() -> CheckResult:
    model, seq, plan = _tiny_model()
    target = canonicalize([1, 2, 1, 3], plan.slot_segment_ids)

    def loss():
        return model.decode_teacher_forced(model.encode(seq), plan, target)[1]

    report = grad_check(loss, model.params, tolerance=1e-4)
    return CheckResult("gradients", report.passed, str(report))


def check_masking() -> CheckResult:
    model, seq, plan = _tiny_model()
    target = canonicalize([1, 2, 1, 3], plan.slot_segment_ids)
    enc = model.encode(seq)
    base = model.decode_teacher_forced(enc, plan, target)[0].data[0].copy()
    rng = rng_for("selftest", "mask")
    enc.features.data[2:] += rng.standard_normal(enc.features.data[2:].shape) * 5
    enc.inputs[2:] += rng.standard_normal(enc.inputs[2:].shape) * 5
    after = model.decode_teacher_forced(enc, plan, target)[0].data[0]
    return CheckResult("masking_locality", bool(np.array_equal(base, after)), "segment-1 logits under perturbation")


CHECKS: tuple[Callable[[], CheckResult], ...] = (
    check_wer,
    check_cpwer,
    check_der,
    check_jacobi,
    check_orthogonal,
    check_gradients,
    check_masking,
)


def run_all() -> list[CheckResult]:
    out = []
    for check in CHECKS:
        try:
            out.append(check())
        except Exception as exc:  # a crashing check is a failing check
            out.append(CheckResult(check.__name__.removeprefix("check_"), False, f"{type(exc).__name__}: {exc}"))
    return out
