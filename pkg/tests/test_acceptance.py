"""Acceptance gate: one test per primary criterion, each adding a PASS/FAIL line to the run summary.

Tolerances are the stated ones. A criterion that cannot be met is still
evaluated in full and marked as an expected failure, never loosened.
"""

import math
import time
import warnings

import numpy as np
import pytest
import torch

from unimov.align import DepthEncoder, DepthEncoderConfig, LearnableTemperature, ProjectionHead, symmetric_contrastive
from unimov.captions import caption_infonce, combined_caption_loss
from unimov.config import TOY_PRESET
from unimov.evaluate import CategoryPartition, InstancePrediction, harmonic_mean, instance_metrics, semantic_metrics
from unimov.extractor import AttentionBlock, ExtractorConfig, HierarchicalExtractor, extract
from unimov.gradcheck import TOLERANCE, check_function, check_module
from unimov.report import emit_report
from unimov.scene import PointCloud, SectorSpec, partition_sectors
from unimov.train import run_toy

import oracles
from conftest import random_cloud
from published_tables import triples

# ---------------------------------------------------------------------------
# 1. harmonic mean of published rows


@pytest.mark.xfail(
    strict=False,
    reason="about half of the published rows are not the harmonic mean of their own base/novel columns",
)
def test_published_harmonic_means(record_criterion):
    t0 = time.perf_counter()
    rows = list(triples())
    misses = []
    for table, method, split, (h, a, b) in rows:
        ours = harmonic_mean(a, b)
        assert ours == pytest.approx(oracles.harmonic(a, b), abs=1e-12)
        if abs(ours - h) > 0.15:
            misses.append(f"{table} {method} {split}: printed {h}, recomputed {ours:.2f}")
    elapsed = time.perf_counter() - t0
    ok = not misses and elapsed < 1.0
    record_criterion(
        "harmonic-mean oracle over published tables",
        ok,
        f"{len(rows) - len(misses)}/{len(rows)} rows within 0.15, {elapsed * 1e3:.1f} ms",
    )
    for m in misses:
        print("   ", m)
    assert elapsed < 1.0
    assert not misses, f"{len(misses)} of {len(rows)} rows outside 0.15"


# ---------------------------------------------------------------------------
# 2. metric oracle equivalence


def _fuzz_case(rng):
    n = int(rng.integers(1, 1001))
    k = int(rng.integers(1, 21))
    gt = rng.integers(-1, k, size=n)
    # predictions mostly right so IoUs spread over (0, 1]
    pred = np.where(rng.random(n) < 0.6, gt, rng.integers(0, k, size=n))
    pred = np.where(pred < 0, 0, pred)
    ids = rng.permutation(k)
    n_drop = int(rng.integers(0, 2))
    n_base = int(rng.integers(0, k - n_drop + 1))
    dropped = ids[:n_drop]
    base = ids[n_drop : n_drop + n_base]
    novel = ids[n_drop + n_base :]
    return pred, gt, CategoryPartition(base, novel, dropped)


def _single_instance_ap(iou):
    gt = np.arange(10)
    # overlap 6 of 10 gt points plus extra points so |p ∩ g| / |p ∪ g| = iou
    inter = 6
    union = round(inter / iou)
    pred = np.concatenate([np.arange(inter), np.arange(100, 100 + union - 10)])
    part = CategoryPartition([0], [])
    _, mb, _, per_class = instance_metrics([InstancePrediction(pred, 0, 0.9)], [(gt, 0)], part)
    return inter / union, per_class[0]


def test_metric_oracle_equivalence(record_criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(200):
        pred, gt, part = _fuzz_case(rng)
        m = semantic_metrics(pred, gt, part)
        iou, mb, mn, h = oracles.confusion_metrics(pred, gt, part.base_ids, part.novel_ids, part.dropped_ids)
        assert m.per_class_iou.keys() == iou.keys()
        for c in iou:
            worst = max(worst, abs(m.per_class_iou[c] - iou[c]))
        for ours, ref in ((m.miou_base, mb), (m.miou_novel, mn), (m.hiou, h)):
            assert (ours is None) == (ref is None)
            if ref is not None:
                worst = max(worst, abs(ours - ref))
    iou6, ap6 = _single_instance_ap(0.6)
    iou4, ap4 = _single_instance_ap(0.4)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and ap6 == 1.0 and ap4 == 0.0 and elapsed < 30
    record_criterion(
        "metric oracle equivalence",
        ok,
        f"max |diff| {worst:.1e} on 200 cases; AP {ap6} at IoU {iou6:.2f}, {ap4} at IoU {iou4:.2f}; {elapsed:.1f} s",
    )
    assert iou6 == pytest.approx(0.6) and iou4 == pytest.approx(0.4)
    assert ok


# ---------------------------------------------------------------------------
# 3. loss values


def test_loss_value_oracles(record_criterion):
    t0 = time.perf_counter()
    dt = torch.float64
    eye2 = torch.eye(2, dtype=dt)
    same = torch.nn.functional.normalize(torch.ones(5, 4, dtype=dt), dim=1)
    one = torch.nn.functional.normalize(torch.randn(1, 4, dtype=dt), dim=1)
    target = math.log(1 + math.exp(-1))
    checks = {
        "infonce uniform = ln 5": (caption_infonce(same, same, 0.07).item(), math.log(5)),
        "infonce N=1 = 0": (caption_infonce(one, one, 0.07).item(), 0.0),
        "infonce orthonormal = ln(1+e^-1)": (caption_infonce(eye2, eye2, 1.0).item(), target),
        "symmetric uniform = ln 5": (symmetric_contrastive(same, same, 0.07).item(), math.log(5)),
        "symmetric B=1 = 0": (symmetric_contrastive(one, one, 0.07).item(), 0.0),
        "symmetric orthonormal = ln(1+e^-1)": (symmetric_contrastive(eye2, eye2, 1.0).item(), target),
        "combined (1,1,1) = 2.6": (combined_caption_loss(1.0, 1.0, 1.0), 2.6),
    }
    bad = [k for k, (got, want) in checks.items() if abs(got - want) > 1e-6]
    elapsed = time.perf_counter() - t0
    record_criterion("loss-value oracles", not bad and elapsed < 1.0, f"{len(checks) - len(bad)}/{len(checks)} values, {elapsed * 1e3:.0f} ms")
    assert not bad, bad
    assert elapsed < 1.0


# ---------------------------------------------------------------------------
# 4. gradients


def _gradient_results():
    dt = torch.float64
    g = torch.Generator().manual_seed(7)
    results = []

    # caption InfoNCE: features and the learnable temperature
    p = torch.nn.functional.normalize(torch.randn(5, 8, generator=g, dtype=dt), dim=1)
    t = torch.nn.functional.normalize(torch.randn(5, 8, generator=g, dtype=dt), dim=1)
    tau = LearnableTemperature(0.2).double()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        results.append(check_function(lambda: caption_infonce(p, t, tau), {"p": p, "t": t}, name="caption InfoNCE"))
    results.append(check_module(tau, lambda m: caption_infonce(p.detach(), t.detach(), m), fraction=1.0, name="caption temperature"))

    # symmetric modal contrastive
    a = torch.nn.functional.normalize(torch.randn(4, 8, generator=g, dtype=dt), dim=1)
    b = torch.nn.functional.normalize(torch.randn(4, 8, generator=g, dtype=dt), dim=1)
    eps = LearnableTemperature(0.1).double()
    results.append(check_function(lambda: symmetric_contrastive(a, b, eps), {"a": a, "b": b}, name="symmetric contrastive"))
    results.append(check_module(eps, lambda m: symmetric_contrastive(a.detach(), b.detach(), m), fraction=1.0, name="modal temperature"))

    # depth encoder with the gate open
    enc = DepthEncoder(8, DepthEncoderConfig(patch_size=4, width=16, n_heads=2)).double()
    with torch.no_grad():
        enc.gate.fill_(0.5)
    depth = torch.rand(2, 8, 8, generator=g, dtype=dt)
    v = torch.randn(8, generator=g, dtype=dt)
    results.append(check_module(enc, lambda m: (m(depth) @ v).sum(), fraction=1.0, name="depth encoder"))

    head = ProjectionHead(16, 8).double()
    x = torch.randn(5, 16, generator=g, dtype=dt)
    results.append(check_module(head, lambda m: (m(x) @ v).sum(), fraction=1.0, name="projection head"))

    # extractor: 1% of every parameter tensor, gates opened so the linking paths carry gradient
    torch.manual_seed(0)
    cfg = ExtractorConfig(n_layers=2, embed_dim=16, n_patches=8, neighbors_per_patch=8, n_heads=2)
    ex = HierarchicalExtractor(cfg).double().eval()
    with torch.no_grad():
        for layer in ex.layers[1:]:
            layer.omega1.fill_(0.3)
            layer.omega2.fill_(-0.2)
        ex.context_gate.fill_(0.5)
    xyz = torch.randn(2, 96, 3, generator=g, dtype=dt)
    feats = torch.rand(2, 96, 3, generator=g, dtype=dt) - 0.5
    w = torch.randn(16, generator=g, dtype=dt)
    results.append(check_module(ex, lambda m: (m(xyz, feats)[1] @ w).sum(), fraction=0.01, name="extractor (1% sample)"))
    return results


def test_gradient_suite(record_criterion):
    t0 = time.perf_counter()
    results = _gradient_results()
    elapsed = time.perf_counter() - t0
    worst = max(r.max_rel_error for r in results)
    ok = all(r.ok for r in results) and elapsed < 300
    record_criterion("gradient suite", ok, f"worst relative error {worst:.1e} over {sum(r.n_checked for r in results)} entries, {elapsed:.0f} s")
    for r in results:
        print(f"    {r.name}: {r.n_checked} entries, max rel err {r.max_rel_error:.2e}")
    assert all(r.max_rel_error <= TOLERANCE for r in results), [(r.name, r.max_rel_error) for r in results if not r.ok]
    assert elapsed < 300


# ---------------------------------------------------------------------------
# 5. structural invariants


def _small_extractor(seed=0, **kw):
    torch.manual_seed(seed)
    cfg = ExtractorConfig(n_layers=2, embed_dim=16, n_patches=8, neighbors_per_patch=8, n_heads=2, **kw)
    return HierarchicalExtractor(cfg)


def test_structural_invariants(record_criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(99)
    failures = []

    # pooled feature is a set function
    ex = _small_extractor()
    with torch.no_grad():
        ex.context_gate.fill_(0.7)
        for layer in ex.layers[1:]:
            layer.omega1.fill_(0.4)
            layer.omega2.fill_(0.4)
    perm_err = 0.0
    for _ in range(10):
        cloud = random_cloud(rng, int(rng.integers(64, 200)))
        _, pooled = extract(cloud, model=ex)
        _, pooled_p = extract(cloud.subset(rng.permutation(len(cloud))), model=ex)
        perm_err = max(perm_err, float(np.abs(pooled - pooled_p).max()))
    if perm_err > 1e-5:
        failures.append(f"permutation {perm_err:.1e}")

    # residual identity f - H = omega * prev on both branches
    layer = ex.layers[1].double()
    g = torch.Generator().manual_seed(3)
    inputs = torch.randn(2, 8, 32, generator=g, dtype=torch.float64)
    centers = torch.randn(2, 8, 3, generator=g, dtype=torch.float64)
    prev = torch.randn(2, 8, 16, generator=g, dtype=torch.float64)
    omega = torch.randn(16, generator=g, dtype=torch.float64)
    layer.eval()
    res_err = 0.0
    for branch in (layer.local, layer.global_):
        with torch.no_grad():
            h = branch.encode(inputs, centers)
            f = branch(inputs, centers, prev, omega)
        res_err = max(res_err, float(((f - h) - omega * prev).abs().max() / (omega * prev).abs().max()))
    if res_err > 1e-6:
        failures.append(f"residual {res_err:.1e}")
    layer.float()

    # zero gates reproduce the link-free network bit for bit
    linked = _small_extractor(seed=5).eval()
    free = HierarchicalExtractor(linked.cfg, linking=False).eval()
    free.load_state_dict(linked.state_dict())
    xyz, feats = torch.randn(1, 128, 3), torch.rand(1, 128, 3)
    with torch.no_grad():
        same = all(torch.equal(u, v) for u, v in zip(linked(xyz, feats), free(xyz, feats)))
    if not same:
        failures.append("zero gate")

    # attention map strictly inside (0, 1), even for extreme inputs
    block = AttentionBlock(16)
    lo, hi = 1.0, 0.0
    for scale in (1e-3, 1.0, 1e3):
        for tokens in (1, 2, 7, 16):
            with torch.no_grad():
                out = block(scale * torch.randn(3, tokens, 16))
            lo, hi = min(lo, out.min().item()), max(hi, out.max().item())
    if not (lo > 0 and hi < 1):
        failures.append(f"attention range [{lo}, {hi}]")

    # sector laws on fuzzed clouds
    sector_bad = 0
    for _ in range(100):
        n = int(rng.integers(1, 300))
        pos = rng.normal(size=(n, 3)) * rng.uniform(0.1, 10)
        cloud = PointCloud(pos, np.zeros((n, 3)), np.zeros(n), np.zeros(n))
        theta = float(rng.choice([30, 45, 60, 72, 90, 120, 180, 360, rng.uniform(5, 360)]))
        phi = 0.0 if rng.random() < 0.5 else float(rng.uniform(0, theta * 0.9))
        spec = SectorSpec(theta, phi)
        members = [set(m.tolist()) for m in partition_sectors(cloud, spec).membership]
        ok = len(members) == math.ceil(360 / (theta - phi) - 1e-9)
        ok &= set().union(*members) == set(range(n))
        if phi == 0:
            ok &= sum(len(m) for m in members) == n
        ok &= members == oracles.sector_members(pos.tolist(), theta, phi, pos.mean(axis=0))
        sector_bad += not ok
    if sector_bad:
        failures.append(f"sector laws failed on {sector_bad} clouds")

    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 120
    record_criterion(
        "structural invariants",
        ok,
        f"perm {perm_err:.1e}, residual {res_err:.1e}, attention in [{lo:.2g}, {hi:.7f}], 100 sector clouds; {elapsed:.1f} s"
        + (f"; failed: {failures}" if failures else ""),
    )
    assert ok, failures


# ---------------------------------------------------------------------------
# 6. end-to-end toy run and ablation ordering

VARIANTS = {
    "full": {},
    "no Uni": {"use_depth_modality": False},
    "no HFE": {"use_hfe": False},
    "no PCL": {"use_pcl": False},
}


@pytest.fixture(scope="module")
def toy_runs():
    """(seed, variant) -> RunReport for the toy preset, with total wall-clock."""
    t0 = time.perf_counter()
    runs = {}
    for seed in (0, 1, 2):
        for name, changes in VARIANTS.items():
            runs[seed, name] = run_toy(TOY_PRESET.replace(seed=seed, **changes), label=name)[1]
    return runs, time.perf_counter() - t0


@pytest.mark.slow
def test_end_to_end_open_vocabulary(toy_runs, record_criterion):
    runs, elapsed = toy_runs
    novel_id = TOY_PRESET.novel_ids[0]
    novel_iou = runs[0, "full"].per_class_iou[novel_id]
    wins = 0
    for seed in (0, 1, 2):
        h = {name: runs[seed, name].metrics["hiou"] for name in VARIANTS}
        won = all(h["full"] > h[name] for name in VARIANTS if name != "full")
        wins += won
        print(f"    seed {seed}: " + ", ".join(f"{k} {v:.4f}" for k, v in h.items()) + ("  full best" if won else ""))
    ok = novel_iou > 0.5 and wins >= 2 and elapsed < 600
    record_criterion(
        "end-to-end toy open-vocabulary run",
        ok,
        f"novel IoU {novel_iou:.3f} (seed 0), full beats every ablation in {wins}/3 seeds, {elapsed:.0f} s",
    )
    assert novel_iou > 0.5
    assert wins >= 2
    assert elapsed < 600


# ---------------------------------------------------------------------------
# 7. determinism


@pytest.mark.slow
def test_determinism(tmp_path, record_criterion):
    cfg = TOY_PRESET.replace(epochs=3)
    outputs = []
    for k in range(2):
        _, report = run_toy(cfg, label="determinism")
        outputs.append(emit_report(report, tmp_path / f"run{k}"))
    same = {
        key: outputs[0][key].read_bytes() == outputs[1][key].read_bytes() for key in ("kv", "json", "table", "plot")
    }
    record_criterion("determinism", all(same.values()), ", ".join(f"{k} {'identical' if v else 'differs'}" for k, v in same.items()))
    assert all(same.values()), same
