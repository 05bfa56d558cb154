"""Acceptance checks: scaled-down quantitative runs plus property contracts.

Each test prints one [criterion NN] PASS line (visible with pytest -s); the
test names carry the criterion numbers so the -v listing gives a pass/fail
line per criterion either way.  The training-scale fixtures take a few
minutes each; the whole module runs in roughly 12-15 minutes on a laptop CPU.
"""

import json
import time

import numpy as np
import pytest
from scipy import sparse
from scipy.stats import spearmanr

from pincl import autodiff as ad
from pincl import losses, solver, tpms
from pincl.autodiff import Tensor, finite_difference_grad, grad
from pincl.cli import main as cli_main
from pincl.continual import (CLConfig, ReplayPlan, replay_train, score_dataset,
                             select_replay, sft_train, split_group,
                             train_baseline)
from pincl.data import generate_groups
from pincl.losses import LossConfig
from pincl.model import Transolver, TransolverConfig
from pincl.solver import solve_labels

RESULT = "[criterion {:02d}] PASS - {}"


# ---------------------------------------------------------------------------
# shared training-scale fixtures (two groups, 50 samples each at 32x32)


def mean_rel_l2(model, samples):
    vals = [losses.relative_errors(
        losses.apply_dirichlet(model.forward(s.k), "hard_mask"), s.label)[0]
        for s in samples]
    return float(np.mean(vals))


@pytest.fixture(scope="module")
def pools():
    ds = generate_groups(schedule=[(-1.0, 0.2), (1.7, 1.3)],
                         samples_per_group=50, nx=32, seed=0)
    for g in ds.groups:
        solve_labels(g.samples)
    tr0, ev0 = split_group(ds.groups[0].samples, 0.2)
    tr1, ev1 = split_group(ds.groups[1].samples, 0.2)
    return {"tr0": tr0, "ev0": ev0, "tr1": tr1, "ev1": ev1}


MODEL_CFG = TransolverConfig(layers=2, slices=8, channels=32, heads=4)
TRAIN_CFG = CLConfig(loss=LossConfig(form="energy"), epochs=200, lr=1e-3,
                     batch_size=8)
STAGE2_CFG = CLConfig(loss=LossConfig(form="energy"), epochs=150, lr=1e-3,
                      batch_size=8)


@pytest.fixture(scope="module")
def base(pools):
    started = time.perf_counter()
    model = train_baseline(Transolver(MODEL_CFG, seed=0), pools["tr0"],
                           "joint", TRAIN_CFG, seed=1)
    seconds = time.perf_counter() - started
    return {"model": model, "seconds": seconds,
            "id_err": mean_rel_l2(model, pools["ev0"]),
            "ood_err": mean_rel_l2(model, pools["ev1"])}


@pytest.fixture(scope="module")
def naive(pools, base):
    model = train_baseline(base["model"], pools["tr1"], "naive_finetune",
                           STAGE2_CFG, seed=2)
    return {"model": model,
            "past_err": mean_rel_l2(model, pools["ev0"]),
            "new_err": mean_rel_l2(model, pools["ev1"])}


@pytest.fixture(scope="module")
def joint(pools):
    started = time.perf_counter()
    model = train_baseline(Transolver(MODEL_CFG, seed=0),
                           pools["tr0"] + pools["tr1"], "joint",
                           STAGE2_CFG, seed=3)
    seconds = time.perf_counter() - started
    return {"model": model, "seconds": seconds,
            "past_err": mean_rel_l2(model, pools["ev0"]),
            "new_err": mean_rel_l2(model, pools["ev1"])}


@pytest.fixture(scope="module")
def replay(pools, base):
    scored_past = score_dataset(base["model"], pools["tr0"], "strong")
    scored_new = score_dataset(base["model"], pools["tr1"], "strong")
    selection = select_replay(scored_past, scored_new, ReplayPlan(), seed=4)
    by_id = {(s.group_id, s.sample_index): s
             for s in pools["tr0"] + pools["tr1"]}
    d_mix = [by_id[i] for i in selection.ids()]
    started = time.perf_counter()
    model = replay_train(base["model"], d_mix, STAGE2_CFG, seed=5)
    seconds = time.perf_counter() - started
    return {"model": model, "seconds": seconds, "d_mix_size": len(d_mix),
            "past_err": mean_rel_l2(model, pools["ev0"]),
            "new_err": mean_rel_l2(model, pools["ev1"])}


# ---------------------------------------------------------------------------
# criterion 1: reverse-mode gradients vs central finite differences


def _p(shape, seed, low=-1.0, high=1.0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True,
                  name=f"p{seed}")


def _spmat():
    return sparse.random(5, 5, density=0.4, random_state=7, format="csr")


PRIMITIVE_CASES = [
    ("add", [_p((3, 4), 0), _p((3, 4), 1)],
     lambda p: ad.reduce_sum(ad.square(ad.add(p[0], p[1])))),
    ("sub", [_p((3, 4), 2), _p((4,), 3)],
     lambda p: ad.reduce_sum(ad.square(ad.sub(p[0], p[1])))),
    ("mul", [_p((3, 4), 4), _p((3, 1), 5)],
     lambda p: ad.reduce_sum(ad.square(ad.mul(p[0], p[1])))),
    ("div", [_p((3, 4), 6), _p((3, 4), 7, low=0.5, high=1.5)],
     lambda p: ad.reduce_sum(ad.square(ad.div(p[0], p[1])))),
    ("neg", [_p((3, 4), 8)],
     lambda p: ad.reduce_sum(ad.square(ad.neg(p[0])))),
    ("square", [_p((3, 4), 9)],
     lambda p: ad.reduce_sum(ad.square(ad.square(p[0])))),
    ("sqrt", [_p((3, 4), 10, low=0.5, high=2.0)],
     lambda p: ad.reduce_sum(ad.square(ad.sqrt(p[0])))),
    ("exp", [_p((3, 4), 11)],
     lambda p: ad.reduce_sum(ad.square(ad.exp(p[0])))),
    # inputs kept away from the kink at zero on both branches
    ("relu", [_p((3, 4), 12, low=0.2, high=1.0),
              _p((3, 4), 12, low=-1.0, high=-0.2)],
     lambda p: ad.reduce_sum(ad.square(ad.add(ad.relu(p[0]), ad.relu(p[1]))))),
    ("gelu", [_p((3, 4), 13)],
     lambda p: ad.reduce_sum(ad.square(ad.gelu(p[0])))),
    ("softmax", [_p((3, 4), 14)],
     lambda p: ad.reduce_sum(ad.square(ad.add(ad.softmax(p[0], axis=-1),
                                              ad.softmax(p[0], axis=0))))),
    ("matmul", [_p((3, 4), 15), _p((4, 2), 16)],
     lambda p: ad.reduce_sum(ad.square(ad.matmul(p[0], p[1])))),
    ("transpose", [_p((3, 4), 17)],
     lambda p: ad.reduce_sum(ad.square(ad.matmul(ad.transpose(p[0]), p[0])))),
    ("reshape", [_p((3, 4), 18)],
     lambda p: ad.reduce_sum(ad.square(ad.reshape(p[0], (2, 6))))),
    ("slice_cols", [_p((3, 6), 19)],
     lambda p: ad.reduce_sum(ad.square(ad.slice_cols(p[0], 1, 4)))),
    ("concat_cols", [_p((3, 2), 20), _p((3, 3), 21)],
     lambda p: ad.reduce_sum(ad.square(ad.concat_cols([p[0], p[1]])))),
    ("spmm", [_p((5, 3), 22)],
     lambda p: ad.reduce_sum(ad.square(ad.spmm(_spmat(), p[0])))),
    ("reduce_sum", [_p((3, 4), 23)],
     lambda p: ad.reduce_sum(ad.square(ad.reduce_sum(p[0], axis=0)))),
    ("reduce_mean", [_p((3, 4), 24)],
     lambda p: ad.reduce_sum(ad.square(ad.reduce_mean(p[0], axis=1,
                                                      keepdims=True)))),
    ("layer_norm", [_p((3, 4), 25), _p((4,), 26), _p((4,), 27)],
     lambda p: ad.reduce_sum(ad.square(ad.layer_norm(p[0], p[1], p[2])))),
]

ALL_PRIMITIVES = {
    "add", "sub", "mul", "div", "neg", "square", "sqrt", "exp", "relu",
    "gelu", "softmax", "matmul", "transpose", "reshape", "slice_cols",
    "concat_cols", "spmm", "reduce_sum", "reduce_mean", "layer_norm",
}


def test_criterion_01_gradient_integrity():
    started = time.perf_counter()
    covered = set()
    for name, params, build in PRIMITIVE_CASES:
        analytic = grad(build(params), params)
        numeric = finite_difference_grad(lambda ps: build(ps).item(), params)
        for a, n in zip(analytic, numeric):
            np.testing.assert_allclose(a, n, rtol=1e-5, atol=1e-8,
                                       err_msg=f"primitive {name}")
        covered.add(name)
    assert covered == ALL_PRIMITIVES

    # full model: energy loss of a 2-layer (C=16, S=4) network on an 8x8 field
    model = Transolver(TransolverConfig(layers=2, slices=4, channels=16,
                                        heads=4), seed=0)
    rng = np.random.default_rng(0)
    k = np.exp(0.3 * rng.normal(size=(8, 8)))
    q = np.ones((8, 8))
    cfg = LossConfig(form="energy")
    params = model.trainable_parameters()

    def full(ps):
        return losses.loss_from_raw_t(model.forward_t(k), k, q, cfg).item()

    analytic = grad(losses.loss_from_raw_t(model.forward_t(k), k, q, cfg),
                    params)
    numeric = finite_difference_grad(full, params)
    for a, n in zip(analytic, numeric):
        np.testing.assert_allclose(a, n, rtol=1e-5, atol=1e-8)
    elapsed = time.perf_counter() - started
    assert elapsed < 60.0
    print(RESULT.format(1, f"{len(covered)} primitives + "
                        f"{sum(p.values.size for p in params)}-parameter model "
                        f"FD-checked in {elapsed:.1f}s"))


# ---------------------------------------------------------------------------
# criterion 2: manufactured-solution accuracy and convergence order


def manufactured_rel_l2(n):
    x = np.linspace(0.0, 1.0, n)
    xx, yy = np.meshgrid(x, x, indexing="ij")
    truth = np.sin(np.pi * xx) * np.sin(np.pi * yy)
    q = 2.0 * np.pi ** 2 * truth
    t, report = solver.solve_darcy(np.ones((n, n)), q)
    assert report.converged
    return losses.relative_errors(t, truth)[0]


def test_criterion_02_oracle_manufactured_convergence():
    err65 = manufactured_rel_l2(65)
    err33 = manufactured_rel_l2(33)
    ratio = err33 / err65
    assert err65 < 1e-3
    assert 3.5 <= ratio <= 4.5
    print(RESULT.format(2, f"rel_L2(65)={err65:.2e}, 33->65 ratio {ratio:.2f}"))


# ---------------------------------------------------------------------------
# criterion 3: energy of the oracle solution


def test_criterion_03_energy_identity_and_minimality():
    n = 33
    h = 1.0 / (n - 1)
    x = np.linspace(0.0, 1.0, n)
    xx, yy = np.meshgrid(x, x, indexing="ij")
    q = 2.0 * np.pi ** 2 * np.sin(np.pi * xx) * np.sin(np.pi * yy)
    k = np.ones((n, n))
    t, _ = solver.solve_darcy(k, q)

    e_star = losses.energy_functional(k, t, q)
    w = losses.trapezoid_weights(n, n)
    target = -0.5 * float(np.sum(w * q.reshape(-1) * t.reshape(-1)))
    assert abs(e_star - target) <= 10.0 * h ** 2

    rng = np.random.default_rng(11)
    interior = losses.interior_indicator(n, n).reshape(n, n)
    scale = 0.1 * float(np.max(np.abs(t)))
    for _ in range(20):
        noise = scale * rng.normal(size=(n, n)) * interior
        assert losses.energy_functional(k, t + noise, q) > e_star
    print(RESULT.format(3, f"|E - (-1/2 qT)| = {abs(e_star - target):.2e} "
                        f"<= {10 * h * h:.2e}; 20/20 perturbations above"))


# ---------------------------------------------------------------------------
# criteria 4-8: training-scale behavior


def test_criterion_04_pde_driven_training_reaches_low_error(base):
    assert base["id_err"] < 0.15
    assert base["seconds"] < 1800.0
    print(RESULT.format(4, f"held-out rel_L2 {base['id_err']:.4f} after 200 "
                        f"epochs in {base['seconds']:.0f}s"))


def test_criterion_05_ood_degradation(base):
    ratio = base["ood_err"] / base["id_err"]
    assert ratio >= 2.0
    print(RESULT.format(5, f"OOD/ID rel_L2 ratio {ratio:.1f}"))


def test_criterion_06_naive_finetuning_forgets(base, naive):
    ratio = naive["past_err"] / base["id_err"]
    assert ratio >= 2.0
    print(RESULT.format(6, f"past-group rel_L2 {base['id_err']:.4f} -> "
                        f"{naive['past_err']:.4f} ({ratio:.1f}x)"))


def test_criterion_07_replay_beats_naive_at_lower_cost(naive, joint, replay):
    assert replay["past_err"] < naive["past_err"]
    assert replay["past_err"] <= 1.5 * joint["past_err"]
    assert replay["new_err"] <= 1.5 * joint["new_err"]
    assert replay["seconds"] < joint["seconds"]
    print(RESULT.format(
        7, f"past {replay['past_err']:.4f} (naive {naive['past_err']:.4f}, "
           f"joint {joint['past_err']:.4f}), new {replay['new_err']:.4f} "
           f"(joint {joint['new_err']:.4f}); {replay['seconds']:.0f}s vs "
           f"joint {joint['seconds']:.0f}s on |D_mix|={replay['d_mix_size']}"))


def test_criterion_08_score_tracks_true_error(pools, base):
    samples = pools["tr0"] + pools["ev0"] + pools["tr1"] + pools["ev1"]
    scored = score_dataset(base["model"], samples, "strong")
    errors = [losses.relative_errors(
        losses.apply_dirichlet(base["model"].forward(s.k), "hard_mask"),
        s.label)[0] for s in samples]
    assert len(scored) >= 100
    rho = spearmanr([s.score for s in scored], errors).statistic
    assert rho >= 0.5
    print(RESULT.format(8, f"Spearman {rho:.3f} over {len(scored)} samples"))


# ---------------------------------------------------------------------------
# criterion 9: low-rank adapter contracts


def test_criterion_09_lora_contracts():
    cfg = TransolverConfig(layers=1, slices=2, channels=8, heads=2)
    rng = np.random.default_rng(3)
    k = np.exp(0.3 * rng.normal(size=(8, 8)))

    # alpha = 0 is a bitwise no-op even with nonzero adapter matrices
    model = Transolver(cfg, seed=1)
    ref = model.forward(k)
    model.attach_lora(rank=2, alpha=0.0, seed=9)
    for adp in model.adapters.values():
        adp.b.values[:] = rng.normal(size=adp.b.values.shape)
    assert model.forward(k).tobytes() == ref.tobytes()
    model.detach_lora()
    assert model.forward(k).tobytes() == ref.tobytes()

    # trainable count is sum r(d+m); base gradients are exactly zero
    model.attach_lora(rank=2, alpha=16.0, seed=9)
    expected = sum(adp.rank * sum(model.params[name].values.shape)
                   for name, adp in model.adapters.items())
    assert model.trainable_count() == expected
    for adp in model.adapters.values():
        adp.b.values[:] = 0.05 * rng.normal(size=adp.b.values.shape)
    loss = losses.loss_from_raw_t(model.forward_t(k), k, np.ones((8, 8)),
                                  LossConfig(form="energy"))
    base_params = list(model.params.values())
    base_grads = grad(loss, base_params)
    assert all(np.all(g == 0.0) for g in base_grads)
    adapter_grads = grad(loss, model.trainable_parameters())
    assert any(np.any(g != 0.0) for g in adapter_grads)

    # merging folds the update into the base within 1e-12
    adapted = model.forward(k)
    model.merge_lora()
    assert not model.adapters
    assert all(p.requires_grad for p in model.params.values())
    assert float(np.max(np.abs(model.forward(k) - adapted))) <= 1e-12
    print(RESULT.format(9, f"no-op/count({expected})/merge/frozen-grad "
                        "contracts hold"))


# ---------------------------------------------------------------------------
# criterion 10: supervised fine-tuning on the worst decile


def test_criterion_10_sft_improves_worst_decile(pools, naive):
    pool = pools["tr0"] + pools["tr1"]
    model = naive["model"]
    errs = {}
    for s in pool:
        pred = losses.apply_dirichlet(model.forward(s.k), "hard_mask")
        errs[(s.group_id, s.sample_index)] = losses.relative_errors(
            pred, s.label)[0]
    ranked = sorted(pool, key=lambda s: (-errs[(s.group_id, s.sample_index)],
                                         s.group_id, s.sample_index))
    n_sft = max(1, round(0.1 * len(pool)))
    d_sft, d_left = ranked[:n_sft], ranked[n_sft:]
    before_sft = float(np.mean([errs[(s.group_id, s.sample_index)]
                                for s in d_sft]))
    before_left = float(np.mean([errs[(s.group_id, s.sample_index)]
                                 for s in d_left]))
    cfg = CLConfig(loss=LossConfig(form="energy"), epochs=150, lr=1e-3,
                   batch_size=8, lora=True, lora_rank=8, lora_alpha=16.0)
    tuned = sft_train(model, d_sft, d_left, cfg, seed=6)
    after_sft = mean_rel_l2(tuned, d_sft)
    after_left = mean_rel_l2(tuned, d_left)
    assert after_sft <= 0.8 * before_sft
    assert after_left <= 1.2 * before_left
    print(RESULT.format(10, f"worst decile {before_sft:.4f} -> "
                        f"{after_sft:.4f}; distilled {before_left:.4f} -> "
                        f"{after_left:.4f}"))


# ---------------------------------------------------------------------------
# criterion 11: lattice volume fractions


def test_criterion_11_tpms_volume_fractions():
    vf = tpms.tpms_voxel("SchoenGyroid", "solid", 64, 0.0).volume_fraction
    assert abs(vf - 0.5) <= 0.02
    for kind in ("SchoenGyroid", "SchwarzDiamond", "FischerKochS"):
        lo, hi = tpms.ADMISSIBLE_C[(kind, "solid")]
        fractions = [tpms.tpms_voxel(kind, "solid", 48, c).volume_fraction
                     for c in np.linspace(lo, hi, 7)]
        assert all(b <= a for a, b in zip(fractions, fractions[1:])), kind
    print(RESULT.format(11, f"gyroid vf(c=0)={vf:.4f}; all three kinds "
                        "monotone non-increasing in c"))


# ---------------------------------------------------------------------------
# criterion 12: end-to-end determinism through the CLI


def test_criterion_12_reruns_are_byte_identical(tmp_path):
    config = {
        "dataset": {"schedule": [[-1.0, 0.2], [0.5, 0.8]],
                    "samples_per_group": 6, "nx": 12, "seed": 0,
                    "eval_fraction": 0.25},
        "model": {"layers": 1, "slices": 2, "channels": 8, "heads": 2},
        "strategy": {"name": "replay", "epochs": 2, "batch_size": 4},
    }
    outputs = []
    for run in ("a", "b"):
        out = tmp_path / run
        cfg_path = tmp_path / f"config_{run}.json"
        cfg_path.write_text(json.dumps(dict(config, out=str(out))))
        for command in ("gen-data", "solve-labels", "continual"):
            assert cli_main([command, "--config", str(cfg_path)]) == 0
        outputs.append(out)
    a, b = outputs
    assert (a / "matrix.csv").read_bytes() == (b / "matrix.csv").read_bytes()
    assert (a / "scores.csv").read_bytes() == (b / "scores.csv").read_bytes()
    assert (a / "model.pncl").read_bytes() == (b / "model.pncl").read_bytes()
    print(RESULT.format(12, "matrix.csv, scores.csv and model checkpoint "
                        "byte-identical across reruns"))


# ---------------------------------------------------------------------------
# supplemental: replay on past-only data must not destabilize the past group


def test_replay_on_past_only_data_preserves_past_accuracy(pools, base):
    cfg = CLConfig(loss=LossConfig(form="energy"), epochs=50, lr=1e-3,
                   batch_size=8)
    model = replay_train(base["model"], pools["tr0"][:10], cfg, seed=7)
    past = mean_rel_l2(model, pools["ev0"])
    assert past <= 1.2 * base["id_err"]
    print(f"[supplemental] PASS - past rel_L2 {past:.4f} vs "
          f"pre-training {base['id_err']:.4f}")
