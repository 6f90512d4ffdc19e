"""Acceptance suite: the ten exit criteria, one test and one printed
PASS/FAIL line each. Run with ``pytest -s tests/test_acceptance.py`` to see
the lines as they complete; the full desk-scale pipeline (dataset, proxies,
three guided trainings, five fine-tunings, determinism rerun) takes around
half an hour on one CPU.
"""

import struct
import time
from types import SimpleNamespace

import numpy as np
import pytest

import gofl.autodiff as ad
from gofl import checks
from gofl.autodiff import Tensor
from gofl.cli import run as cli_run
from gofl.dataset import (DatasetManifest, ManifestEntry, TEXTURE_MARGIN, _make_texture,
                          generate_synthetic, load_manifest, save_manifest)
from gofl.flow_io import FlowField, Image, load_flo, read_flo, read_image, write_flo, write_image
from gofl.losses import LossWeights, epe_loss, epe_metric, multiscale_loss, reconstruction_loss
from gofl.model import ModelConfig, clone_params, load_checkpoint
from gofl.proxy import HSConfig, generate_proxy, pyramid_flow
from gofl.trainer import TrainConfig, evaluate, finetune, train_guided
from gofl.warping import SampleGrid, bilinear_gather, bilinear_sample

from oracles import (bilinear_sample_formula, block_mean_loops, conv2d_loops, epe_mean_loops)

DATA_SEED = 20
TRAIN_SEEDS = (0, 1, 2)
FINETUNE_SEEDS = (0, 1, 2, 3, 4)


def announce(criterion, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    print(f"\n{line}")
    assert ok, line


def read_summary(path):
    rows = {}
    for line in path.read_text().splitlines():
        key, value = line.split("\t", 1)
        rows[key] = value
    return rows


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Desk-scale benchmark driven through the CLI: 576 pairs (512 train,
    64 test), Horn-Schunck proxies, one guided training per seed."""
    root = tmp_path_factory.mktemp("acceptance")
    data = root / "data"
    proxy = root / "proxy"
    assert cli_run(["gen-data", "--count", "576", "--size", "64x64",
                    "--seed", str(DATA_SEED), "--out", str(data)]) == 0
    assert cli_run(["proxy", "--manifest", str(data / "manifest.txt"),
                    "--out", str(proxy)]) == 0

    started = time.perf_counter()
    runs = {}
    for seed in TRAIN_SEEDS:
        cfg_path = root / f"guided_{seed}.cfg"
        cfg_path.write_text(TrainConfig.desk_guided(seed=seed).to_text())
        out = root / f"train_{seed}"
        assert cli_run(["train", "--manifest", str(proxy / "manifest.txt"),
                        "--config", str(cfg_path), "--out", str(out)]) == 0
        summary = root / f"eval_{seed}.txt"
        assert cli_run(["eval", "--manifest", str(proxy / "manifest.txt"),
                        "--ckpt", str(out / "ckpt_final.gofl"),
                        "--split", "test", "--out", str(summary)]) == 0
        rows = read_summary(summary)
        runs[seed] = SimpleNamespace(
            ckpt=out / "ckpt_final.gofl",
            summary=summary,
            epe=float(rows["mean_epe"]),
            zero_flow=float(rows["zero_flow_epe"]),
        )
    return SimpleNamespace(root=root, data=data, proxy=proxy, runs=runs,
                           train_wall_s=time.perf_counter() - started)


def test_criterion_1_gradient_suite():
    started = time.perf_counter()
    results = checks.run_all(points=10, tol=1e-3)
    elapsed = time.perf_counter() - started
    worst = max(results, key=lambda r: r.max_rel_err)
    ok = all(r.passed for r in results) and elapsed < 120
    announce(1, ok, f"{len(results)} differentiable ops pass finite-difference checks "
                    f"(worst {worst.name} rel err {worst.max_rel_err:.2e} < 1e-3, "
                    f"{elapsed:.1f}s < 120s)")


def test_criterion_2_oracle_equivalence():
    started = time.perf_counter()
    rng = np.random.default_rng(42)

    for _ in range(8):
        c, o, k = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.choice([1, 3]))
        h, w = int(rng.integers(k, 17)), int(rng.integers(k, 17))
        stride, padding = int(rng.choice([1, 2])), int(rng.choice([0, 1]))
        x = Tensor(rng.standard_normal((1, c, h, w)))
        wt = Tensor(rng.standard_normal((o, c, k, k)))
        b = Tensor(rng.standard_normal((1, o, 1, 1)))
        got = ad.conv2d(x, wt, b, stride=stride, padding=padding).data
        ref = conv2d_loops(x.data, wt.data, b.data, stride, padding)
        assert np.allclose(got, ref, atol=1e-6)

    for _ in range(4):
        h, w = int(rng.integers(2, 17)), int(rng.integers(2, 17))
        img = Tensor(rng.uniform(0, 1, (1, 1, h, w)))
        xs = rng.uniform(-2, w + 1, (h, w))
        ys = rng.uniform(-2, h + 1, (h, w))
        got = bilinear_sample(img, SampleGrid(xs, ys)).data[0, 0]
        assert np.allclose(got, bilinear_sample_formula(img.data[0, 0], xs, ys), atol=1e-6)

    for _ in range(4):
        h, w = int(rng.integers(1, 17)), int(rng.integers(1, 17))
        pred = Tensor(rng.standard_normal((1, 2, h, w)) * 3)
        tgt = Tensor(rng.standard_normal((1, 2, h, w)) * 3)
        ref = epe_mean_loops(pred.data[0, 0], pred.data[0, 1], tgt.data[0, 0], tgt.data[0, 1])
        assert abs(epe_loss(pred, tgt).item() - ref) < 1e-6
        mask = rng.random((h, w)) < 0.7
        if mask.any():
            got = epe_metric(
                FlowField(pred.data[0, 0].astype(np.float32), pred.data[0, 1].astype(np.float32)),
                FlowField(tgt.data[0, 0].astype(np.float32), tgt.data[0, 1].astype(np.float32),
                          mask))
            ref = epe_mean_loops(pred.data[0, 0].astype(np.float32),
                                 pred.data[0, 1].astype(np.float32),
                                 tgt.data[0, 0].astype(np.float32),
                                 tgt.data[0, 1].astype(np.float32), mask)
            assert abs(got - ref) < 1e-6

    # multi-scale total vs term-by-term composition (finest prediction 16x16)
    w = LossWeights()
    preds = [Tensor(rng.standard_normal((1, 2, 64 // f, 64 // f))) for f in (64, 32, 16, 8, 4)]
    proxy = Tensor(rng.standard_normal((1, 2, 64, 64)) * 3)
    i1 = Tensor(rng.uniform(0, 1, (1, 1, 64, 64)))
    i2 = Tensor(rng.uniform(0, 1, (1, 1, 64, 64)))
    for mode in ("guided", "finetune"):
        total = multiscale_loss(preds, proxy, i1, i2, w, mode).item()
        ref = 0.0
        for k, f in enumerate((64, 32, 16, 8, 4)):
            tgt = Tensor(np.stack([block_mean_loops(proxy.data[0, c], f) / f
                                   for c in range(2)])[None])
            term = epe_loss(preds[k], tgt).item()
            if mode == "finetune":
                i1k = Tensor(block_mean_loops(i1.data[0, 0], f)[None, None])
                i2k = Tensor(block_mean_loops(i2.data[0, 0], f)[None, None])
                term += w.lam * reconstruction_loss(i1k, i2k, preds[k], w).item()
            ref += w.scale_weights[k] * term
        assert abs(total - ref) < 1e-6

    elapsed = time.perf_counter() - started
    announce(2, elapsed < 60,
             f"conv2d, bilinear_sample, epe loss/metric and multiscale_loss match their "
             f"independent oracles within 1e-6 ({elapsed:.1f}s < 60s)")


def test_criterion_3_format_fidelity():
    started = time.perf_counter()
    rng = np.random.default_rng(7)
    for _ in range(1000):
        h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        flow = FlowField((rng.standard_normal((h, w)) * 40).astype(np.float32),
                         (rng.standard_normal((h, w)) * 40).astype(np.float32))
        blob = write_flo(flow)
        back = read_flo(blob)
        assert write_flo(back) == blob

    flow = FlowField(np.array([[1.5]], np.float32), np.array([[-2.0]], np.float32))
    assert write_flo(flow) == struct.pack("<fii", 202021.25, 1, 1) + struct.pack("<ff", 1.5, -2.0)

    for channels in (1, 3):
        for _ in range(50):
            h, w = int(rng.integers(1, 12)), int(rng.integers(1, 12))
            raw = rng.integers(0, 256, (h, w, channels), dtype=np.uint8)
            img = Image(raw.astype(np.float32) / 255.0)
            blob = write_image(img)
            assert write_image(read_image(blob)) == blob

    elapsed = time.perf_counter() - started
    announce(3, elapsed < 10,
             f"1000 .flo round-trips bit-exact, 20-byte oracle matches, netpbm round-trips "
             f"exact on 8-bit lattices ({elapsed:.1f}s < 10s)")


def test_criterion_4_classical_estimator_sanity():
    started = time.perf_counter()

    def pair(seed, tx, ty, h=64, w=64):
        rng = np.random.default_rng(seed)
        tex = _make_texture(rng, h + 2 * TEXTURE_MARGIN, w + 2 * TEXTURE_MARGIN).astype(np.float64)
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        m = TEXTURE_MARGIN
        return (bilinear_gather(tex, xs + m, ys + m),
                bilinear_gather(tex, xs - tx + m, ys - ty + m))

    def interior_epe(seed, tx, ty):
        i1, i2 = pair(seed, tx, ty)
        flow = pyramid_flow(i1, i2, HSConfig())
        sl = (slice(8, -8), slice(8, -8))
        return float(np.sqrt((flow.u[sl] - tx) ** 2 + (flow.v[sl] - ty) ** 2).mean())

    large = [(5.0, -3.0), (6.0, 0.0), (-4.0, 4.0), (0.0, -6.0), (-5.5, 1.5)]
    small = [(1.0, 0.5), (-1.2, 0.8), (0.0, 1.5), (1.5, 0.0), (-0.7, -0.7)]
    large_epes = [interior_epe(100 + i, tx, ty) for i, (tx, ty) in enumerate(large)]
    small_epes = [interior_epe(200 + i, tx, ty) for i, (tx, ty) in enumerate(small)]
    elapsed = time.perf_counter() - started

    ok = max(large_epes) < 1.0 and max(small_epes) < 0.5 and elapsed < 60
    announce(4, ok,
             f"pyramidal Horn-Schunck interior EPE: max {max(large_epes):.3f} < 1.0 px on "
             f"translations up to 6 px, max {max(small_epes):.3f} < 0.5 px up to 1.5 px "
             f"({elapsed:.1f}s < 60s)")


def test_criterion_5_guided_learning_from_proxies(pipeline):
    ratios = sorted(r.epe / r.zero_flow for r in pipeline.runs.values())
    median = ratios[len(ratios) // 2]
    ok = median <= 0.60 and pipeline.train_wall_s < 45 * 60
    announce(5, ok,
             f"stage-1 test EPE over zero-flow baseline: median ratio {median:.3f} <= 0.60 "
             f"(seeds {[f'{r:.3f}' for r in ratios]}, "
             f"{pipeline.train_wall_s / 60:.1f} min < 45 min)")


def test_criterion_6_student_not_better_than_teacher(pipeline):
    manifest = load_manifest(pipeline.proxy / "manifest.txt")
    teacher = float(np.mean([
        epe_metric(load_flo(manifest.resolve(e.proxy)), load_flo(manifest.resolve(e.gt)))
        for e in manifest.subset("test")]))
    students = sorted(r.epe for r in pipeline.runs.values())
    median = students[len(students) // 2]
    announce(6, median >= teacher,
             f"stage-1 student test EPE {median:.3f} >= classical teacher test EPE "
             f"{teacher:.3f} (expected ordering)")


def test_criterion_7_finetuning_improves(pipeline):
    started = time.perf_counter()
    manifest = load_manifest(pipeline.proxy / "manifest.txt")
    base_run = pipeline.runs[TRAIN_SEEDS[0]]
    start_params, _ = load_checkpoint(base_run.ckpt)
    base_epe = base_run.epe

    ft_epes = []
    for seed in FINETUNE_SEEDS:
        cfg = TrainConfig.desk_finetune(seed=seed)     # 1k iters, lambda 0.1, lr 1e-6
        params, _ = finetune(clone_params(start_params), manifest, cfg)
        ft_epes.append(evaluate(params, manifest, "test").mean_epe)
    elapsed = time.perf_counter() - started

    median = float(np.median(ft_epes))
    worst_rel = max(e / base_epe - 1.0 for e in ft_epes)
    ok = median < base_epe and worst_rel <= 0.05 and elapsed < 20 * 60
    announce(7, ok,
             f"fine-tuned median test EPE {median:.4f} < stage-1 {base_epe:.4f}, worst seed "
             f"{worst_rel * 100:+.2f}% <= +5% ({elapsed / 60:.1f} min < 20 min)")


def test_criterion_8_lambda_zero_degeneracy(pipeline):
    started = time.perf_counter()
    manifest = load_manifest(pipeline.proxy / "manifest.txt")
    start_params, _ = load_checkpoint(pipeline.runs[TRAIN_SEEDS[0]].ckpt)

    ft_cfg = TrainConfig(stage="finetune", base_lr=1e-6, max_iters=50, batch_size=8,
                         seed=77, loss_weights=LossWeights(lam=0.0))
    guided_cfg = TrainConfig(stage="guided", base_lr=1e-6, max_iters=50, batch_size=8,
                             seed=77, schedule_start=10 ** 9)
    ft_params, ft_rep = finetune(clone_params(start_params), manifest, ft_cfg)
    g_params, g_rep = train_guided(ModelConfig(), manifest, guided_cfg,
                                   init_params=clone_params(start_params))
    elapsed = time.perf_counter() - started

    identical = (ft_rep.losses == g_rep.losses and all(
        np.array_equal(ft_params.tensors[n].data, g_params.tensors[n].data)
        for n in ft_params.tensors))
    announce(8, identical and elapsed < 120,
             f"lambda = 0 fine-tuning reproduces the guided continuation bit-exactly over "
             f"50 iterations ({elapsed:.1f}s < 120s)")


def test_criterion_9_unsupervised_isolation(tmp_path):
    started = time.perf_counter()
    data = generate_synthetic(16, (64, 64), seed=31, out_dir=tmp_path / "data")
    proxied, report = generate_proxy(data, HSConfig(iterations_per_level=40), tmp_path / "proxy")
    assert not report.skipped
    poisoned_entries = [ManifestEntry(e.pair_id, e.split, e.img1, e.img2,
                                      f"nowhere/{e.pair_id}.flo", e.proxy)
                        for e in proxied.entries]
    poisoned = save_manifest(DatasetManifest(proxied.root, poisoned_entries),
                             tmp_path / "poisoned.txt")

    model_cfg = ModelConfig(base_channels=4)
    guided_cfg = TrainConfig(stage="guided", max_iters=30, batch_size=4, seed=1,
                             schedule_start=1000, schedule_period=100)
    params, g_rep = train_guided(model_cfg, poisoned, guided_cfg)
    ft_cfg = TrainConfig(stage="finetune", base_lr=1e-6, max_iters=15, batch_size=4, seed=2)
    _, f_rep = finetune(params, poisoned, ft_cfg)
    elapsed = time.perf_counter() - started

    ok = len(g_rep.losses) == 30 and len(f_rep.losses) == 15 and elapsed < 300
    announce(9, ok,
             f"guided training and fine-tuning ran to completion with every gt path invalid "
             f"({elapsed:.1f}s < 300s)")


def test_criterion_10_end_to_end_determinism(pipeline, tmp_path):
    seed = TRAIN_SEEDS[0]
    data2 = tmp_path / "data"
    proxy2 = tmp_path / "proxy"
    train2 = tmp_path / "train"
    summary2 = tmp_path / "eval.txt"
    assert cli_run(["gen-data", "--count", "576", "--size", "64x64",
                    "--seed", str(DATA_SEED), "--out", str(data2)]) == 0
    assert cli_run(["proxy", "--manifest", str(data2 / "manifest.txt"),
                    "--out", str(proxy2)]) == 0
    cfg_path = tmp_path / "guided.cfg"
    cfg_path.write_text(TrainConfig.desk_guided(seed=seed).to_text())
    assert cli_run(["train", "--manifest", str(proxy2 / "manifest.txt"),
                    "--config", str(cfg_path), "--out", str(train2)]) == 0
    assert cli_run(["eval", "--manifest", str(proxy2 / "manifest.txt"),
                    "--ckpt", str(train2 / "ckpt_final.gofl"),
                    "--split", "test", "--out", str(summary2)]) == 0

    base_run = pipeline.runs[seed]
    proxies_equal = all(
        (proxy2 / f.name).read_bytes() == f.read_bytes()
        for f in sorted(pipeline.proxy.glob("*.flo")))
    ckpt_equal = base_run.ckpt.read_bytes() == (train2 / "ckpt_final.gofl").read_bytes()
    eval_equal = base_run.summary.read_bytes() == summary2.read_bytes()
    announce(10, proxies_equal and ckpt_equal and eval_equal,
             "rerunning the CLI pipeline with identical seeds reproduces proxies, the "
             "checkpoint and the EPE summary bit-for-bit")
