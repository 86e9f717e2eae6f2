"""End-to-end acceptance checks.

Each test prints one [PASS]/[FAIL] line (visible with pytest -s). The slow
item is the full bound-tightness sweep, which runs fifty restarts for each of
ten sequence lengths; everything else finishes in seconds.
"""

import json
import math
from contextlib import contextmanager

import numpy as np
import pytest

from lipmha import cli
from lipmha.attention import (
    LayerNormParams,
    MaskSet,
    MhaParams,
    head_probs,
    layer_norm,
    mha_forward,
    save_params,
    softmax_rows,
)
from lipmha.bounds import bound_inf, bound_masked_inf, layernorm_bound_inf
from lipmha.contractive import adversarial_batch, max_reconstruction_error
from lipmha.experiments import bound_tightness_sweep, glorot_params
from lipmha.jacobian import (
    dp_jacobian,
    finite_diff_jacobian,
    jacobian_norm,
    l2_jacobian_tied,
    l2_jacobian_untied,
    layernorm_jacobian,
    mha_jacobian,
)
from lipmha.linalg import op_norm_inf, phi, phi_inv, power_iteration, spectral_norm_oracle


@contextmanager
def criterion(label: str):
    try:
        yield
    except BaseException:
        print(f"[FAIL] {label}")
        raise
    print(f"[PASS] {label}")


def rel_frobenius(analytic, numeric):
    return np.linalg.norm(analytic - numeric) / max(1.0, np.linalg.norm(numeric))


def random_head_params(rng, kind, tied, d, biases=False):
    wq = rng.uniform(-1.5, 1.5, size=(1, d, d))
    wk = wq if tied else rng.uniform(-1.5, 1.5, size=(1, d, d))
    return MhaParams(
        heads=1, dim=d, kind=kind, tied=tied,
        wq=wq, wk=np.array(wk), wv=rng.uniform(-1.5, 1.5, size=(1, d, d)),
        wo=rng.uniform(-1.5, 1.5, size=(d, d)),
        bq=rng.uniform(-1, 1, size=d) if biases else None,
        bk=rng.uniform(-1, 1, size=d) if biases else None,
    )


def test_01_jacobians_match_finite_differences():
    with criterion("1. analytical Jacobians match central finite differences (<1e-6 rel)"):
        rng = np.random.default_rng(101)
        worst = 0.0
        for trial in range(100):
            n, d = int(rng.integers(2, 9)), int(rng.integers(1, 5))
            x = rng.uniform(-3, 3, size=(n, d))

            params = random_head_params(rng, "dp", tied=False, d=d, biases=trial % 2 == 0)
            numeric = finite_diff_jacobian(lambda z: head_probs(z, params, 0) @ z, x, h=1e-5)
            worst = max(worst, rel_frobenius(dp_jacobian(x, params).assemble(), numeric.assemble()))

            tied = random_head_params(rng, "l2", tied=True, d=d)
            a = tied.query_gram(0)
            numeric = finite_diff_jacobian(lambda z: head_probs(z, tied, 0) @ z @ a, x, h=1e-5)
            worst = max(worst, rel_frobenius(l2_jacobian_tied(x, tied).assemble(), numeric.assemble()))

            untied = random_head_params(rng, "l2", tied=False, d=d)
            a = untied.query_gram(0)
            numeric = finite_diff_jacobian(lambda z: head_probs(z, untied, 0) @ z @ a, x, h=1e-5)
            worst = max(worst, rel_frobenius(l2_jacobian_untied(x, untied).assemble(), numeric.assemble()))

            ln = LayerNormParams(
                gamma=rng.uniform(-2, 2, size=d), beta=rng.normal(size=d),
                eps=10.0 ** rng.uniform(-5, 0),
            )
            xv = rng.uniform(-3, 3, size=d)
            h = 1e-5
            fd = np.zeros((d, d))
            for c in range(d):
                xp, xm = xv.copy(), xv.copy()
                xp[c] += h
                xm[c] -= h
                fd[:, c] = (layer_norm(xp, ln) - layer_norm(xm, ln)) / (2 * h)
            worst = max(worst, rel_frobenius(layernorm_jacobian(xv, ln), fd))
        assert worst < 1e-6, f"worst relative Frobenius error {worst:.3e}"


def test_02_dot_product_jacobian_diverges_with_input_spread():
    with criterion("2. dot-product Jacobian grows without bound at the zero-query point"):
        plain = MhaParams.identity(1, 1, kind="dp")
        bias = MhaParams(
            heads=1, dim=1, kind="dp", tied=False,
            wq=np.ones((1, 1, 1)), wk=np.ones((1, 1, 1)),
            wv=np.ones((1, 1, 1)), wo=np.ones((1, 1)),
            bq=np.array([0.5]), bk=np.array([-0.25]),
        )
        for params, zero_query_row in ((plain, 0.0), (bias, -0.5)):
            norms = []
            for t in (1.0, 10.0, 100.0, 1000.0):
                x = np.array([[zero_query_row], [1.0], [-1.0]])
                x[1:] *= t
                norms.append(jacobian_norm(dp_jacobian(x, params), "inf"))
            assert all(b > a for a, b in zip(norms, norms[1:])), norms
            assert norms[-1] > 1e3, norms


def test_03_bound_tightness_sweep_dominance_and_growth():
    with criterion("3. full sweep: every optimized lower bound <= 4 phi_inv(N-1) + 1, growing in N"):
        rows = bound_tightness_sweep(
            list(range(100, 1001, 100)), d=1, h=1, p="inf",
            restarts=50, seed=0, top_k=5, max_steps=80, rel_tol=1e-4,
        )
        for row in rows:
            expected_upper = 4.0 * phi_inv(row.n - 1.0) + 1.0
            assert row.upper_bound == pytest.approx(expected_upper, rel=1e-12)
            for lb in row.lower_bounds:
                assert lb <= row.upper_bound
        assert rows[-1].lower_bounds[0] > rows[0].lower_bounds[0]


def test_04_attention_variance_trace_is_capped():
    with criterion("4. tied-attention variance trace <= phi_inv(N-1) on 1e4 random configurations"):
        rng = np.random.default_rng(104)
        for _ in range(10_000):
            n = int(rng.integers(2, 65))
            hd = int(rng.integers(1, 5))
            d = hd * int(rng.integers(1, 3))
            scale = rng.uniform(0.1, 4.0)
            x = rng.uniform(-10, 10, size=(n, d))
            wq = rng.normal(size=(d, hd)) * scale
            y = x @ wq / hd**0.25
            sq = np.sum(y * y, axis=1)
            logits = -(sq[:, None] - 2.0 * (y @ y.T) + sq[None, :])
            p = softmax_rows(logits)
            mean = p @ y
            e_sq = p @ sq
            lhs = e_sq - np.sum(mean * mean, axis=1)
            mid = e_sq - 2.0 * np.sum(mean * y, axis=1) + sq
            cap = phi_inv(n - 1.0)
            assert np.all(mid - lhs >= -1e-10)
            assert np.all(cap - mid >= -1e-10)


def test_05_invertibility_split_at_reference_scale():
    with criterion("5. residual attention: l2 inverts (1e-5 @ c=0.9, 1e-8 @ c=0.5), dp stays stuck"):
        n, d, h, batch = 64, 64, 8, 128
        inputs = adversarial_batch(batch, n, d, u=10.0, seed=0)

        l2 = glorot_params(d, h, kind="l2", tied=True, seed=0)
        lip = bound_inf(l2, n).value
        f_l2 = lambda z: mha_forward(z, l2) / lip
        assert max_reconstruction_error(inputs, f_l2, 0.9, 50) < 1e-5
        assert max_reconstruction_error(inputs, f_l2, 0.5, 30) < 1e-8

        dp = glorot_params(d, h, kind="dp", tied=False, seed=0)
        f_dp = lambda z: mha_forward(z, dp)
        assert max_reconstruction_error(inputs, f_dp, 0.9, 50) > 1e-1


def test_06_phi_machinery():
    with criterion("6. phi inverse: roundtrip, log cap over N up to 1e6, exact value at e^2"):
        x = np.linspace(0.0, 10.0, 10_001)
        assert np.max(np.abs(phi_inv(phi(x)) - x)) <= 1e-10
        n = np.arange(3, 1_000_001, dtype=np.float64)
        assert np.all(phi_inv(n - 1.0) <= np.log(n))
        assert abs(phi_inv(math.e**2) - 1.0) <= 1e-10


def test_07_power_iteration_against_oracle():
    with criterion("7. power iteration: never above the Jacobi oracle, within 1e-6 at 100 steps"):
        for k in range(100):
            w = np.random.default_rng([7, k]).random((50, 50))
            sigma, _ = power_iteration(w, iters=100, seed=k)
            exact = spectral_norm_oracle(w)
            assert sigma <= exact + 1e-10
            assert abs(sigma - exact) < 1e-6


def test_08_masking():
    with criterion("8. masking: zero blocks, effective-length bound dominates, self-mask rejected"):
        rng = np.random.default_rng(108)
        params = glorot_params(4, 2, kind="l2", tied=True, seed=8)
        dp_params = glorot_params(4, 2, kind="dp", tied=False, seed=9)
        n = 6
        for _ in range(20):
            pairs = set()
            for i in range(n):
                off = [j for j in range(n) if j != i]
                rng.shuffle(off)
                for j in off[: int(rng.integers(0, 3))]:
                    pairs.add((i, j))
            mask = MaskSet.from_pairs(pairs)
            x = rng.uniform(-5, 5, size=(n, 4))
            for p in (params, dp_params):
                j = mha_jacobian(x, p, mask)
                for (a, b) in mask.pairs:
                    assert np.array_equal(j.block(a, b), np.zeros((4, 4)))
            upper = bound_masked_inf(params, n, mask).value
            for _ in range(5):
                xs = rng.uniform(-10, 10, size=(n, 4))
                assert jacobian_norm(mha_jacobian(xs, params, mask), "inf") <= upper
        with pytest.raises(ValueError):
            bound_masked_inf(params, 4, MaskSet.from_pairs([(2, 2)]))
        with pytest.raises(ValueError, match="fully masked"):
            MaskSet.from_pairs([(0, j) for j in range(4)]).validate(4)


def test_09_layernorm_bound_dominates():
    with criterion("9. LayerNorm bound >= sampled Jacobian norms for D in {2,8,64}"):
        rng = np.random.default_rng(109)
        for d in (2, 8, 64):
            for eps in (1e-5, 1e-2, 1.0):
                p = LayerNormParams(gamma=rng.uniform(-2, 2, size=d), beta=np.zeros(d), eps=eps)
                cap = layernorm_bound_inf(p, d)
                worst = 0.0
                for _ in range(10_000):
                    x = rng.uniform(-5, 5, size=d)
                    worst = max(worst, op_norm_inf(layernorm_jacobian(x, p)))
                assert worst <= cap + 1e-12, (d, eps, worst, cap)


def test_10_cli_reruns_are_byte_identical(tmp_path):
    with criterion("10. seeded CLI commands reproduce byte-identical output files"):
        param_file = tmp_path / "params.json"
        save_params(MhaParams.identity(4, 2, kind="l2"), param_file)
        commands = {
            "sweep": ["sweep", "--n", "4,6", "--restarts", "2", "--top-k", "2",
                      "--max-steps", "15", "--seed", "5"],
            "invert": ["invert", "--kind", "l2", "--c", "0.5,0.9", "--iters", "1,5",
                       "--n", "6", "--d", "4", "--heads", "2", "--batch", "3", "--seed", "5"],
            "diverge": ["diverge", "--n", "3", "--d", "1", "--steps", "25", "--seed", "5"],
            "bound": ["bound", "--params", str(param_file), "--n", "8"],
        }
        for name, argv in commands.items():
            blobs = []
            for run_idx in range(2):
                out = tmp_path / f"{name}_{run_idx}.out"
                assert cli.main(argv + ["--out", str(out)]) == 0
                blobs.append(out.read_bytes())
            assert blobs[0] == blobs[1], f"{name} output differs between runs"
            if name == "bound":
                json.loads(blobs[0])
