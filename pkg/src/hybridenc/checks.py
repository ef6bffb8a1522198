"""Invariant suites shared by ``verify`` and the acceptance tests.

Each suite returns a list of ``CheckResult``; a suite passes iff all do.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .assembler import budget_report
from .discrete_tokenizer import Codebook, kmeans, quantize
from .mini_lm import HybridSequence, LmConfig, MiniLM, backprop_inputs
from .model import ModelConfig
from .numeric_core import bce_with_logits, finite_diff_errors, matmul, rng_for
from .patch_selector import SelectorMLP, select_top_m
from .continuous_encoder import ContinuousSequence
from .pseudo_labels import MaskRaster, patch_labels
from .vocab_bridge import Projector, UnifiedVocab, base_text_table, expand_embeddings, to_unified

GRAD_TOLERANCE = 1e-6
GRAD_EPSILON = 1e-5
# coordinates whose gradient is below this are dominated by round-off in the central difference
GRAD_NOISE_FLOOR = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float | int | None = None
    threshold: float | int | None = None
    seconds: float = 0.0
    detail: dict = field(default_factory=dict)

    def line(self) -> str:
        head = f"{'PASS' if self.passed else 'FAIL'} {self.name}"
        if self.value is not None:
            head += f" value={self.value}"
        if self.threshold is not None:
            head += f" threshold={self.threshold}"
        return head

    def as_dict(self) -> dict:
        return asdict(self)


def _timed(name, fn, threshold=None) -> CheckResult:
    t = time.perf_counter()
    passed, value, detail = fn()
    return CheckResult(name, bool(passed), value, threshold, round(time.perf_counter() - t, 3), detail)


# -----------------------------------------------------------------------------
# budget
# -----------------------------------------------------------------------------


def budget_suite() -> list[CheckResult]:
    cfg = ModelConfig.paper_geometry()

    def rows():
        got = {r.alpha: (r.m, r.visual_total) for r in budget_report(cfg.n_c, cfg.n_d, [0.1, 0.25])}
        want = {0.1: (57, 89), 0.25: (144, 176)}
        return got == want, {str(k): v[1] for k, v in got.items()}, {"n_c": cfg.n_c, "n_d": cfg.n_d}

    return [_timed("budget.paper_rows", rows)]


# -----------------------------------------------------------------------------
# oracles
# -----------------------------------------------------------------------------


def triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def sort_and_take(scores, m):
    """Exhaustive reference: order all indices by (-score, index), take m, restore original order."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return sorted(order[:m])


def pixel_scan_labels(mask, p):
    h, w = mask.shape
    labels = []
    for r in range(h // p):
        for c in range(w // p):
            hit = 0
            for y in range(r * p, r * p + p):
                for x in range(c * p, c * p + p):
                    if mask[y, x]:
                        hit = 1
            labels.append(hit)
    return labels


def matmul_oracle(cases: int = 300, seed: int = 0):
    rng = rng_for(seed, "oracle.matmul")
    for _ in range(cases):
        m, k, n = (int(v) for v in rng.integers(1, 9, size=3))
        a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
        if not np.array_equal(matmul(a, b), triple_loop(a, b)):
            return False, cases, {"dims": [m, k, n]}
    return True, cases, {}


def unified_offset_oracle(cases: int = 20, seed: int = 0):
    """Exhaustive bijection check of d -> d + N for random (N, N_v) up to 10^4."""
    rng = rng_for(seed, "oracle.offset")
    for _ in range(cases):
        n, nv = (int(v) for v in rng.integers(1, 10_001, size=2))
        vocab = UnifiedVocab(n, nv)
        d = np.arange(nv)
        u = np.asarray(to_unified(d, vocab))
        if not (np.array_equal(u, d + n) and u.min() == n and u.max() == vocab.size - 1
                and np.array_equal(np.asarray(vocab.from_unified(u)), d)):
            return False, cases, {"N": n, "NV": nv}
    return True, cases, {}


def selection_oracle(cases: int = 1000, seed: int = 0):
    rng = rng_for(seed, "oracle.select")
    alphas = [round(0.1 * i, 1) for i in range(1, 11)]
    for _ in range(cases):
        n_c = int(rng.integers(10, 65))
        # coarse score grid so ties actually happen
        scores = rng.integers(0, 8, size=n_c) / 8.0
        alpha = alphas[int(rng.integers(len(alphas)))]
        seq = ContinuousSequence(rng.normal(size=(n_c, 2)), np.arange(n_c), "x")
        red = select_top_m(seq, scores, alpha)
        m = len(red)
        if red.kept_positions.tolist() != sort_and_take(scores.tolist(), m) or m != int(np.floor(n_c * alpha + 1e-9)):
            return False, cases, {"n_c": n_c, "alpha": alpha}
    return True, cases, {}


def pseudo_label_oracle(cases: int = 500, seed: int = 0):
    rng = rng_for(seed, "oracle.labels")
    for _ in range(cases):
        p = int(rng.choice([4, 8, 16]))
        h = p * int(rng.integers(1, 64 // p + 1))
        w = p * int(rng.integers(1, 64 // p + 1))
        mask = (rng.random((h, w)) < rng.choice([0.002, 0.02, 0.2])).astype(np.uint8)
        if patch_labels(MaskRaster(mask), p).labels.tolist() != pixel_scan_labels(mask, p):
            return False, cases, {"shape": [h, w], "p": p}
    return True, cases, {}


def quantize_identity_oracle(n_v: int = 256, dim: int = 8, seed: int = 0):
    words = rng_for(seed, "oracle.codebook").normal(size=(n_v, dim))
    got = quantize(words, Codebook(words)).indices
    return np.array_equal(np.asarray(got), np.arange(n_v)), n_v, {}


def kmeans_monotone_oracle(seed: int = 0):
    rng = rng_for(seed, "oracle.kmeans")
    samples = rng.normal(size=(1000, 4))
    _, history = kmeans(samples, 16, 50, rng_for(seed, "oracle.kmeans.fit"))
    worst = max((b - a for a, b in zip(history, history[1:])), default=0.0)
    return worst <= 0.0, len(history) - 1, {"max_increase": worst, "first": history[0], "last": history[-1]}


def oracle_suite(seed: int = 0) -> list[CheckResult]:
    return [
        _timed("oracle.matmul_triple_loop", lambda: matmul_oracle(seed=seed)),
        _timed("oracle.unified_offset", lambda: unified_offset_oracle(seed=seed)),
        _timed("oracle.select_top_m", lambda: selection_oracle(seed=seed)),
        _timed("oracle.patch_labels", lambda: pseudo_label_oracle(seed=seed)),
        _timed("oracle.quantize_identity", lambda: quantize_identity_oracle(seed=seed)),
        _timed("oracle.kmeans_monotone", lambda: kmeans_monotone_oracle(seed=seed)),
    ]


# -----------------------------------------------------------------------------
# gradients
# -----------------------------------------------------------------------------


def _grad_result(name, f, params, epsilon=GRAD_EPSILON) -> CheckResult:
    t = time.perf_counter()
    worst, worst_at, n_coords, above = 0.0, "", 0, 0.0
    for p in params:
        g, num, rel = finite_diff_errors(f, p, epsilon)
        n_coords += rel.size
        if rel.size and rel.max() > worst:
            i = int(rel.argmax())
            worst, worst_at = float(rel.max()), f"{p.name}[{i}] analytic={g[i]:.3e} numeric={num[i]:.3e}"
        big = np.abs(g) >= GRAD_NOISE_FLOOR
        if big.any():
            above = max(above, float(rel[big].max()))
    detail = {"coordinates": n_coords, "worst": worst_at, "max_rel_error_above_floor": above,
              "noise_floor": GRAD_NOISE_FLOOR, "epsilon": epsilon}
    return CheckResult(name, worst <= GRAD_TOLERANCE, worst, GRAD_TOLERANCE, round(time.perf_counter() - t, 3), detail)


def selector_grad_case(seed: int = 0, z_llm: int = 64, patches: int = 8):
    """Selector BCE on random projected-patch/EOS rows."""
    rng = rng_for(seed, "gradcheck.selector")
    mlp = SelectorMLP(2 * z_llm, z_llm, seed)
    x = rng.normal(size=(patches, 2 * z_llm))
    y = (rng.random(patches) < 0.5).astype(np.float64)

    def loss(backward=False):
        logits, cache = mlp.forward(x)
        value, dl = bce_with_logits(logits, y)
        if backward:
            mlp.backward(dl, cache)
        return value

    for p in mlp.params():
        p.zero_grad()
    loss(True)
    return loss, mlp.params()


def lm_grad_case(seed: int = 0, z_llm: int = 16, n_text: int = 16, n_visual: int = 8, z: int = 8):
    """LM cross-entropy on an 8-token hybrid sequence ``C C D D T T T T``.

    Gradients reach the projector through the continuous rows, the table
    through the discrete/text rows and the tied head, and every LM block.
    """
    rng = rng_for(seed, "gradcheck.lm")
    table = expand_embeddings(base_text_table(n_text, z_llm, seed), n_visual, seed)
    lm = MiniLM(LmConfig(z_llm, 2, 2, 8, n_text + n_visual), table, seed)
    proj = Projector(z, z_llm, seed)
    feats = rng.normal(size=(2, z))
    ids = np.array([-1, -1, n_text + 1, n_text + 5, 3, 7, 2, n_text - 1])
    tags = "CCDDTTTT"

    def build():
        y, _ = proj.forward(feats)
        return HybridSequence(np.concatenate([y, table(ids[2:])]), tags, ids, cont_feats=feats)

    def loss():
        return lm.loss(build())

    params = lm.params() + table.params() + proj.params()
    for p in params:
        p.zero_grad()
    seq = build()
    _, d = lm.loss(seq, backward=True)
    backprop_inputs(seq, d, table, proj)
    groups = {
        "projector": proj.params(),
        "embedding_and_head": table.params(),
        "lm_blocks": [p for p in lm.params() if p.name.startswith("lm.block") or p.name.startswith("lm.ln_f")],
        "lm_positions": [p for p in lm.params() if p.name == "lm.pos_embed"],
    }
    return loss, groups


def grad_suite(seed: int = 0) -> list[CheckResult]:
    f, params = selector_grad_case(seed)
    out = [_grad_result("grad.selector_mlp", f, params)]
    f, groups = lm_grad_case(seed)
    out += [_grad_result(f"grad.{name}", f, ps) for name, ps in groups.items()]
    return out


# -----------------------------------------------------------------------------
# freeze
# -----------------------------------------------------------------------------


def freeze_suite(seed: int = 0, steps: int = 10, reports=None) -> list[CheckResult]:
    """Checksum audit per stage. Runs a short ``run_all`` unless reports are supplied."""
    from .pipeline import StageConfig, run_all, stage_trainable

    if reports is None:
        _, reports = run_all(seed, [StageConfig(k, steps=steps) for k in (1, 2, 3, 4)])
    out = []
    for r in reports:
        bad = r.frozen_violations()
        expected = sorted(n for n in r.before if stage_trainable(r.stage, n))
        ok = not bad and sorted(r.trainable) == expected
        out.append(CheckResult(f"freeze.stage{r.stage}", ok, len(r.before) - len(r.trainable), None, 0.0,
                               {"violations": bad, "trainable": len(r.trainable), "changed": len(r.changed())}))
    return out


SUITES = {"budget": budget_suite, "oracle": oracle_suite, "grad": grad_suite, "freeze": freeze_suite}


def run_suite(name: str, seed: int = 0, **kw) -> list[CheckResult]:
    if name == "all":
        return [r for key in ("budget", "oracle", "grad", "freeze") for r in run_suite(key, seed, **kw)]
    fn = SUITES[name]
    return fn(seed, **kw) if name == "freeze" else fn(seed) if name != "budget" else fn()
