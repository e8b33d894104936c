"""Acceptance criteria, one test per criterion.

The terminal summary prints a PASS/FAIL line per criterion (see conftest).
Criteria 6 and 7 train real models and take several minutes.
"""
from pathlib import Path
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F

import oracles
from conftest import PREDICT_CHECKS
from fd import grad_rel_error
from ccfg.data import GlyphDataset, SampleRecord, prepare_low_shot, split_848, write_manifest
from ccfg.losses import (
    angular_pair_loss,
    angular_pair_loss_cosine,
    euclidean_pair_loss,
    focal_pair_loss,
    lmcl_loss,
    scl_loss,
)
from ccfg.metrics import evaluate
from ccfg.model import build_model
from ccfg.pairs import build_epoch_plan, dump_plan
from ccfg.synth import synth_resembling_glyphs
from ccfg.training import load_config, run_ce, run_stage1, run_stage2, run_two_stage

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
BASE_NOISE = 0.6  # nuisance level of the standard desk-scale glyph set
ELEVATED_NOISE = 1.2


@pytest.fixture
def float64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


def glyph_set(seed, noise):
    return split_848(prepare_low_shot(synth_resembling_glyphs(5, 2, 20, seed=seed, noise=noise), seed=seed), seed=seed)


def unit(rng, n, d):
    x = rng.standard_normal((n, d))
    return torch.tensor(x / np.linalg.norm(x, axis=1, keepdims=True))


def prob_rows(rng, n, c):
    # mixed with uniform so every entry is >= 0.2 / c: central differences on log p
    # lose accuracy as h^2 / p^2, which would swamp the check near p = 0
    return 0.8 * torch.softmax(torch.tensor(rng.standard_normal((n, c)) * 1.5), 1) + 0.2 / c


def random_instance(rng):
    """One random problem for every loss, within B, N <= 8, d <= 16, C <= 12."""
    b, n = int(rng.integers(2, 9)), int(rng.integers(1, 9))
    d, c = int(rng.integers(2, 17)), int(rng.integers(2, 13))
    labels = rng.integers(0, max(2, b // 2), b).tolist()
    yl = rng.integers(0, c, n)
    yr = np.where(rng.random(n) < 0.5, yl, rng.integers(0, c, n))
    return {
        "z": unit(rng, b, d), "labels": labels, "tau": float(rng.uniform(0.05, 1.0)),
        "pl": prob_rows(rng, n, c), "pr": prob_rows(rng, n, c),
        "yl": yl.tolist(), "yr": yr.tolist(), "gamma": float(rng.uniform(0, 3.5)),
        "cl": torch.tensor(rng.uniform(-0.95, 0.95, (n, c))),
        "cr": torch.tensor(rng.uniform(-0.95, 0.95, (n, c))),
        "s": float(rng.uniform(1, 30)), "m_c": float(rng.uniform(0, 0.5)),
        "el": unit(rng, n, d), "er": unit(rng, n, d),
        "al": torch.tensor(rng.standard_normal((n, d)) * rng.uniform(0.2, 3)),
        "ar": torch.tensor(rng.standard_normal((n, d)) * rng.uniform(0.2, 3)),
        "flags": (yl == yr).astype(int).tolist(), "margin": float(rng.uniform(0.3, 2.0)),
    }


def loss_cases(k):
    """(name, fn over differentiable inputs, inputs) for each loss in instance k."""
    x = random_instance(np.random.default_rng(1000 + k))
    return [
        ("scl", lambda z: scl_loss(z, x["labels"], x["tau"], validate=False), [x["z"]]),
        ("focal", lambda a, b: focal_pair_loss(a, b, x["yl"], x["yr"], x["gamma"]), [x["pl"], x["pr"]]),
        ("lmcl", lambda a, b: lmcl_loss(a, b, x["yl"], x["yr"], x["s"], x["m_c"]), [x["cl"], x["cr"]]),
        ("euclidean", lambda a, b: euclidean_pair_loss(a, b, x["flags"], x["margin"]), [x["el"], x["er"]]),
        ("angular", lambda a, b: angular_pair_loss(a, b, x["flags"], x["margin"]), [x["al"], x["ar"]]),
    ]


@pytest.mark.criterion(1, "gradient suite: autograd vs central differences")
def test_gradient_suite(float64, detail):
    start = time.perf_counter()
    worst = {}
    instances = 60
    for k in range(instances):
        for name, fn, inputs in loss_cases(k):
            for index in range(len(inputs)):
                err = grad_rel_error(fn, inputs, index, step=1e-5)
                worst[name] = max(worst.get(name, 0.0), err)
    elapsed = time.perf_counter() - start
    detail(f"{instances} instances/loss, worst rel err " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
           + f", {elapsed:.1f}s")
    assert all(v <= 1e-4 for v in worst.values()), worst
    assert elapsed <= 120


@pytest.mark.criterion(2, "oracle suite: vectorized losses vs scalar loops")
def test_oracle_suite(float64, detail):
    worst = 0.0
    for k in range(200):
        x = random_instance(np.random.default_rng(5000 + k))
        pairs = [
            (scl_loss(x["z"], x["labels"], x["tau"]), oracles.scl(x["z"].tolist(), x["labels"], x["tau"])),
            (focal_pair_loss(x["pl"], x["pr"], x["yl"], x["yr"], x["gamma"]),
             oracles.focal(x["pl"].tolist(), x["pr"].tolist(), x["yl"], x["yr"], x["gamma"])),
            (lmcl_loss(x["cl"], x["cr"], x["yl"], x["yr"], x["s"], x["m_c"]),
             oracles.lmcl(x["cl"].tolist(), x["cr"].tolist(), x["yl"], x["yr"], x["s"], x["m_c"])),
            (euclidean_pair_loss(x["el"], x["er"], x["flags"], x["margin"]),
             oracles.euclidean(x["el"].tolist(), x["er"].tolist(), x["flags"], x["margin"])),
            (angular_pair_loss(x["al"], x["ar"], x["flags"], x["margin"]),
             oracles.angular(x["al"].tolist(), x["ar"].tolist(), x["flags"], x["margin"])),
            (angular_pair_loss_cosine(x["al"], x["ar"], x["flags"], x["margin"]),
             oracles.angular_cosine(x["al"].tolist(), x["ar"].tolist(), x["flags"], x["margin"])),
            (angular_pair_loss(x["al"], x["ar"], x["flags"], x["margin"]),
             angular_pair_loss_cosine(x["al"], x["ar"], x["flags"], x["margin"]).item()),
        ]
        for got, want in pairs:
            got = got.item()
            if got == want == 0.0:
                continue
            worst = max(worst, oracles.rel_err(got, want))
    detail(f"200 instances, worst rel err {worst:.1e}")
    assert worst <= 1e-9


@pytest.mark.criterion(3, "reduction identities")
def test_reduction_identities(float64, detail):
    worst = 0.0
    for k in range(50):
        x = random_instance(np.random.default_rng(9000 + k))
        yl, yr = torch.tensor(x["yl"]), torch.tensor(x["yr"])
        ce = F.nll_loss(x["pl"].log(), yl, reduction="sum") + F.nll_loss(x["pr"].log(), yr, reduction="sum")
        got = focal_pair_loss(x["pl"], x["pr"], x["yl"], x["yr"], 0.0)
        worst = max(worst, abs(got.item() - ce.item()))
        softmax_ce = (F.cross_entropy(x["cl"], yl, reduction="sum") + F.cross_entropy(x["cr"], yr, reduction="sum"))
        got = lmcl_loss(x["cl"], x["cr"], x["yl"], x["yr"], s=1.0, m_c=0.0)
        worst = max(worst, abs(got.item() - softmax_ce.item()))
    detail(f"worst abs diff {worst:.1e}")
    assert worst <= 1e-12


@pytest.mark.criterion(4, "sampler counts 280 + 320")
def test_sampler_counts(detail):
    labels = [c for c in range(10) for _ in range(8)]
    plans = [build_epoch_plan(labels, 4, e, seed=3, batch_size=32) for e in range(3)]
    again = build_epoch_plan(labels, 4, 0, seed=3, batch_size=32)
    for p in plans:
        assert len(p.positives) == 280 and len(p.negatives) == 320 and len(p) == 600
        assert all(r.flag == int(labels[r.left] == labels[r.right]) for r in p.pairs)
    pos = [sorted(tuple(sorted((r.left, r.right))) for r in p.positives) for p in plans]
    neg = [sorted((r.left, r.right) for r in p.negatives) for p in plans]
    assert pos[0] == pos[1] == pos[2]
    assert neg[0] != neg[1] and neg[1] != neg[2]
    assert again.pairs == plans[0].pairs
    detail(f"positives {len(plans[0].positives)}, negatives {len(plans[0].negatives)}, "
           f"neg/pos {len(plans[0].negatives) / len(plans[0].positives):.2f}")


@pytest.mark.criterion(5, "dataset protocol on {19, 20, 35}")
def test_dataset_protocol(detail):
    samples, names = [], ["a", "b", "c"]
    for cid, n in enumerate((19, 20, 35)):
        samples += [SampleRecord(f"{names[cid]}/{i:03d}", cid, names[cid], payload=np.zeros((2, 2, 3), np.uint8))
                    for i in range(n)]
    ds = split_848(prepare_low_shot(GlyphDataset(samples, names), seed=0), seed=0)
    assert ds.class_names == ["b", "c"]
    counts = ds.split_counts()
    assert all(v == {"train": 8, "val": 4, "test": 8} for v in counts.values())
    for cls in range(2):
        members = [s for s in ds.samples if s.class_id == cls]
        ids = {k: {s.sample_id for s in members if s.split == k} for k in ("train", "val", "test")}
        assert not (ids["train"] & ids["val"] or ids["train"] & ids["test"] or ids["val"] & ids["test"])
        assert set().union(*ids.values()) == {s.sample_id for s in members}
    detail(f"surviving classes {ds.class_names}, (train, val, test) per class "
           f"{[(v['train'], v['val'], v['test']) for v in counts.values()]}")


@pytest.mark.slow
@pytest.mark.criterion(6, "overfit check: train >= 0.95, test >= 0.70, <= 60 epochs, <= 10 min")
def test_overfit_check(detail):
    torch.set_num_threads(1)
    ds = glyph_set(0, BASE_NOISE)
    c1, c2 = load_config(CONFIGS / "desk_stage1.yaml"), load_config(CONFIGS / "desk_stage2.yaml")
    start = time.perf_counter()
    _, result = run_two_stage(c1, c2, ds, None)
    elapsed = time.perf_counter() - start
    train = evaluate(result.model, ds, "train").accuracy
    test = evaluate(result.model, ds, "test").accuracy
    detail(f"epochs {c1.epochs}+{c2.epochs}, train {train:.4f}, test {test:.4f}, {elapsed:.0f}s on 1 thread")
    assert c1.epochs + c2.epochs <= 60
    assert train >= 0.95 and test >= 0.70
    assert elapsed <= 600


ABLATIONS = {
    "ccfg": {},
    "row2 (F+e)": dict(use_lmcl=False, use_a=False),
    "row3 (L+a)": dict(use_focal=False, use_e=False),
}


@pytest.mark.slow
@pytest.mark.criterion(7, "trend check: CCFG and single-head ablations beat the CE baseline")
def test_trend_check(detail):
    torch.set_num_threads(1)
    c1, c2 = load_config(CONFIGS / "desk_stage1.yaml"), load_config(CONFIGS / "desk_stage2.yaml")
    ce_cfg = load_config(CONFIGS / "desk_ce.yaml")
    assert ce_cfg.epochs == c1.epochs + c2.epochs
    acc = {name: [] for name in ["ce", *ABLATIONS]}
    for seed in (0, 1, 2):
        ds = glyph_set(seed, ELEVATED_NOISE)
        acc["ce"].append(evaluate(run_ce(ce_cfg.replace(seed=seed), ds).model, ds, "test").accuracy)
        stage1 = run_stage1(c1.replace(seed=seed), ds)
        for name, mask in ABLATIONS.items():
            cfg = c2.replace(seed=seed, **mask)
            model = run_stage2(cfg, ds, stage1.model).model
            acc[name].append(evaluate(model, ds, "test").accuracy)
    means = {k: float(np.mean(v)) for k, v in acc.items()}
    for k, v in acc.items():
        detail(f"{k}: test acc per seed {[round(a, 4) for a in v]}, mean {means[k]:.4f}")
    for name in ABLATIONS:
        assert means[name] > means["ce"], (name, means)


def test_checked_predict_sees_dual_and_single_heads():
    torch.manual_seed(0)
    x = torch.rand(5, 3, 32, 32)
    for heads in (("e", "a"), ("e",), ("a",)):
        probs, labels = build_model("tiny_cnn", 7, 16, heads=heads).eval().predict(x)
        assert probs.shape == (5, 7) and labels.shape == (5,)


@pytest.mark.criterion(8, "inference contract on every predict batch in the suite")
def test_inference_contract(detail):
    torch.manual_seed(1)
    model = build_model("tiny_cnn", 12, 32).eval()
    for b in (1, 2, 17, 64):
        model.predict(torch.rand(b, 3, 32, 32))
    probs, _ = model.predict(torch.zeros(3, 3, 32, 32))
    assert torch.equal(probs[0], probs[1])
    detail(f"{PREDICT_CHECKS['batches']} predict batches checked, {len(PREDICT_CHECKS['violations'])} violations")
    assert PREDICT_CHECKS["batches"] >= 5
    assert not PREDICT_CHECKS["violations"], PREDICT_CHECKS["violations"][:5]


@pytest.mark.criterion(9, "reproducibility: plan dumps, manifests, epoch-0 losses")
def test_reproducibility(tmp_path, detail):
    torch.set_num_threads(1)
    runs = []
    for r in range(2):
        out = tmp_path / f"run{r}"
        out.mkdir()
        ds = glyph_set(7, BASE_NOISE)
        write_manifest(ds, out / "split_manifest.tsv")
        c1 = load_config(CONFIGS / "desk_stage1.yaml", epochs=1, seed=7)
        c2 = load_config(CONFIGS / "desk_stage2.yaml", epochs=2, seed=7)
        s1 = run_stage1(c1, ds, out)
        s2 = run_stage2(c2, ds, s1.checkpoint, out, plan_dump_dir=out / "plans")
        runs.append((out, s1.log.records[0]["scl"], s2.log.records[0]))
    (a, scl_a, rec_a), (b, scl_b, rec_b) = runs
    assert (a / "split_manifest.tsv").read_bytes() == (b / "split_manifest.tsv").read_bytes()
    dumps = sorted(p.name for p in (a / "plans").iterdir())
    assert dumps == ["plan_epoch000.tsv", "plan_epoch001.tsv"]
    for name in dumps:
        assert (a / "plans" / name).read_bytes() == (b / "plans" / name).read_bytes()
    assert (a / "plans" / dumps[0]).read_bytes() != (a / "plans" / dumps[1]).read_bytes()
    diffs = [abs(scl_a - scl_b)] + [abs(rec_a[k] - rec_b[k]) for k in ("focal", "lmcl", "l_e", "l_a", "total")]
    detail(f"max epoch-0 loss difference {max(diffs):.1e}")
    assert max(diffs) <= 1e-6
    ds = glyph_set(7, BASE_NOISE)
    plan = build_epoch_plan(ds.labels("train"), 4, 0, 7, 32)
    dump_plan(plan, tmp_path / "direct.tsv", [s.sample_id for s in ds.subset("train")])
    assert (tmp_path / "direct.tsv").read_bytes() == (a / "plans" / dumps[0]).read_bytes()
