"""Acceptance suite: one test per criterion, one printed verdict line each.

Run with ``pytest tests/test_acceptance.py -v -s``. The synthetic
end-to-end experiment (criteria 5 and 7) trains the full model plus two
single-branch baselines at 48x48 and takes the bulk of the runtime.
"""

import json
import subprocess
import sys
import time

import numpy as np
import pytest

from cvfc import autodiff as ad
from cvfc.attention import AttentionMatrix, attention_matrix, refine_cam
from cvfc.autodiff import Tensor
from cvfc.cam import CamStack
from cvfc.checkpoint import load_training_state, save_training_state
from cvfc.checks import run_gradcheck_suite
from cvfc.config import TrainConfig
from cvfc.data import synth_generate
from cvfc.evaluation import evaluate_masks, miou, round_half_up
from cvfc.losses import consistency_loss, multilabel_soft_margin, total_loss
from cvfc.model import build_model
from cvfc.train import SGD, co_train_step, train

SEED = 424242
LN2 = float(np.log(2.0))


def verdict(criterion, name, passed, detail=""):
    line = f"ACCEPTANCE {criterion} ({name}): {'PASS' if passed else 'FAIL'}"
    if detail:
        line += f"  [{detail}]"
    print(f"\n{line}")
    assert passed, line


# ---------------------------------------------------------------------------
# Criterion 1: gradient checks
# ---------------------------------------------------------------------------


def test_criterion_1_gradcheck_suite():
    t0 = time.monotonic()
    reports = run_gradcheck_suite(seed=0)
    elapsed = time.monotonic() - t0
    worst = max(r.max_rel_err for r in reports)
    ok = all(r.passed for r in reports) and elapsed <= 60.0
    verdict(
        1,
        "gradient checks",
        ok,
        f"{len(reports)} ops, worst rel err {worst:.2e}, {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# Criterion 2: published-table arithmetic
# ---------------------------------------------------------------------------


def test_criterion_2_miou_arithmetic():
    rows = [
        ((0.7846, 0.5907, 0.7613), 0.7122),
        ((0.6425, 0.4019, 0.6981), 0.5808),
        ((0.7597, 0.6104, 0.7462), 0.7054),
        ((0.6521, 0.3975, 0.4610), 0.5035),
    ]
    ok = all(round_half_up(miou(per_class), 4) == expect for per_class, expect in rows)
    verdict(2, "mIoU aggregation", ok, f"{len(rows)} rows at 4 decimals")


# ---------------------------------------------------------------------------
# Criterion 3: attention properties
# ---------------------------------------------------------------------------


def test_criterion_3_attention_properties():
    rng = np.random.default_rng(SEED)
    h = w = 3
    p = h * w
    row_sum_ok = identity_ok = envelope_ok = True
    for _ in range(100):
        q = Tensor(rng.normal(size=(2, 5, p)).astype(np.float32))
        k = Tensor(rng.normal(size=(2, 5, p)).astype(np.float32))
        attn = attention_matrix(q, k, h, w)
        row_sums = attn.a.data.sum(axis=-1)
        row_sum_ok &= bool(np.abs(row_sums - 1.0).max() <= 1e-6)
        row_sum_ok &= bool((attn.a.data >= 0).all())

        maps = Tensor(rng.normal(size=(2, 3, 2 * h, 2 * w)).astype(np.float32))
        stack = CamStack(maps, ("t", "s", "n"))

        eye = np.broadcast_to(np.eye(p, dtype=np.float32), (2, p, p)).copy()
        ident = AttentionMatrix(Tensor(eye), h, w)
        refined_ident = refine_cam(stack, ident).maps.data
        pooled = ad.adaptive_avg_pool(maps, h, w).data
        identity_ok &= bool(np.abs(refined_ident - pooled).max() <= 1e-6)

        refined = refine_cam(stack, attn).maps.data
        lo = pooled.min(axis=(2, 3), keepdims=True)
        hi = pooled.max(axis=(2, 3), keepdims=True)
        envelope_ok &= bool(
            ((refined >= lo - 1e-6) & (refined <= hi + 1e-6)).all()
        )
    verdict(
        3,
        "attention properties",
        row_sum_ok and identity_ok and envelope_ok,
        f"rows={row_sum_ok} identity={identity_ok} envelope={envelope_ok}",
    )


# ---------------------------------------------------------------------------
# Criterion 4: loss properties
# ---------------------------------------------------------------------------


def test_criterion_4_loss_properties():
    rng = np.random.default_rng(SEED + 1)

    ln2_ok = True
    for y in ([1, 0, 1], [0, 0, 0], [1, 1, 1]):
        value = multilabel_soft_margin(Tensor(np.zeros((1, 3))), np.array([y])).item()
        ln2_ok &= abs(value - LN2) <= 1e-9

    metric_ok = True
    for _ in range(100):
        a, b, c = (Tensor(rng.normal(size=(1, 2, 3, 3))) for _ in range(3))
        dab = consistency_loss(a, b).item()
        metric_ok &= dab >= 0
        metric_ok &= dab == consistency_loss(b, a).item()
        metric_ok &= consistency_loss(a, a).item() == 0.0
        metric_ok &= dab <= consistency_loss(a, c).item() + consistency_loss(c, b).item() + 1e-9

    bitwise_ok = nonneg_ok = True
    for _ in range(1000):
        logits = [Tensor(rng.normal(size=(2, 3)).astype(np.float32)) for _ in range(3)]
        y = (rng.random((2, 3)) < 0.5).astype(np.int8)
        cams = [Tensor(rng.normal(size=(2, 3, 2, 2)).astype(np.float32)) for _ in range(3)]
        parts = tuple(multilabel_soft_margin(l, y) for l in logits)
        l_cons = consistency_loss(cams[0], cams[2])
        l_cross = ad.add(consistency_loss(cams[0], cams[2]), consistency_loss(cams[2], cams[1]))
        total, br = total_loss(parts, l_cons, l_cross)
        # bitwise: recompute in the same accumulation order and dtype
        acc = np.float32(br.l_cls_total)
        acc = np.float32(acc + np.float32(br.l_cons))
        acc = np.float32(acc + np.float32(br.l_cross))
        bitwise_ok &= float(acc) == br.total
        nonneg_ok &= all(v >= 0 for v in br.to_dict().values())
    verdict(
        4,
        "loss properties",
        ln2_ok and metric_ok and bitwise_ok and nonneg_ok,
        f"ln2={ln2_ok} metric={metric_ok} bitwise={bitwise_ok} nonneg={nonneg_ok}",
    )


# ---------------------------------------------------------------------------
# Criteria 5 and 7: the synthetic end-to-end experiment
# ---------------------------------------------------------------------------


def _experiment_config(arch="cvfc"):
    return TrainConfig(
        seed=SEED,
        epochs=40,
        lr=0.006,
        weight_decay=0.01,
        batch_size=8,
        image_size=48,
        arch=arch,
    )


def _eval_model(model, eval_images, eval_gts, class_names):
    preds = []
    for i in range(0, len(eval_images), 8):
        preds.extend(model.infer_pseudo_labels(eval_images[i : i + 8]))
    return evaluate_masks(zip(preds, eval_gts), class_names)


def _trace_lines(history):
    return "\n".join(json.dumps(rec, sort_keys=True) for rec in history).encode()


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    """Train CVFC and both single-branch baselines on the fixed split."""
    out = tmp_path_factory.mktemp("e2e")
    train_patches = synth_generate(seed=SEED, count=200, size=48)
    eval_patches = synth_generate(seed=SEED + 1, count=50, size=48)
    eval_images = np.stack([p.image for p in eval_patches])
    eval_gts = [p.gt_mask for p in eval_patches]

    results = {}
    t0 = time.monotonic()
    for arch in ("cvfc", "mini38", "mini50"):
        cfg = _experiment_config(arch)
        result = train(cfg, train_patches)
        report = _eval_model(result.model, eval_images, eval_gts, cfg.class_names)
        ckpt = out / f"{arch}.cvfc"
        save_training_state(ckpt, result.model, result.optimizer, result.final_epoch, cfg)
        results[arch] = {
            "miou": report.miou,
            "report": report,
            "history": result.history,
            "ckpt": ckpt,
        }
    results["runtime"] = time.monotonic() - t0
    results["train_patches"] = train_patches
    results["out"] = out
    return results


def test_criterion_5_synthetic_end_to_end(experiment):
    m_cvfc = experiment["cvfc"]["miou"]
    m_38 = experiment["mini38"]["miou"]
    m_50 = experiment["mini50"]["miou"]
    runtime = experiment["runtime"]
    ok = (
        m_cvfc >= 0.55
        and m_cvfc - m_38 >= 0.02
        and m_cvfc - m_50 >= 0.02
        and runtime <= 15 * 60
    )
    verdict(
        5,
        "synthetic end-to-end ordering",
        ok,
        f"cvfc={m_cvfc:.4f} mini38={m_38:.4f} mini50={m_50:.4f} runtime={runtime / 60:.1f}min",
    )


def test_criterion_6_overfit_probe():
    cfg = TrainConfig(
        seed=SEED + 7, epochs=1, lr=0.006, weight_decay=0.01, batch_size=4, image_size=32
    )
    model = build_model(cfg)
    patches = synth_generate(seed=SEED + 8, count=4, size=32)
    images = np.stack([p.image for p in patches])
    labels = np.stack([p.label for p in patches])
    opt = SGD(model.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    last = None
    with ad.debug_checks(False):
        for _ in range(500):
            last = co_train_step(model, images, labels, opt)
    ok = last.l_cls_total < 0.05
    verdict(6, "overfit probe", ok, f"l_cls_total={last.l_cls_total:.5f} after 500 steps")


def test_criterion_7_determinism(experiment, tmp_path):
    # second full run of the criterion-5 CVFC training, same seed
    cfg = _experiment_config("cvfc")
    rerun = train(cfg, experiment["train_patches"])
    ckpt2 = experiment["out"] / "cvfc_rerun.cvfc"
    save_training_state(ckpt2, rerun.model, rerun.optimizer, rerun.final_epoch, cfg)

    trace_equal = _trace_lines(experiment["cvfc"]["history"]) == _trace_lines(rerun.history)
    ckpt_equal = experiment["cvfc"]["ckpt"].read_bytes() == ckpt2.read_bytes()

    # checkpoint round trip is bitwise
    model2, opt2, epoch2, cfg2 = load_training_state(experiment["cvfc"]["ckpt"])
    ckpt3 = experiment["out"] / "cvfc_reload.cvfc"
    save_training_state(ckpt3, model2, opt2, epoch2, cfg2)
    roundtrip_equal = ckpt3.read_bytes() == experiment["cvfc"]["ckpt"].read_bytes()

    # resumed training matches an uninterrupted run (reduced scale)
    patches = synth_generate(seed=SEED + 3, count=12, size=16)
    tiny = dict(
        seed=SEED + 4, lr=0.01, weight_decay=0.01, batch_size=4, image_size=16,
        branch1="tiny38", branch2="tiny50", branch3="tiny38",
    )
    full = train(TrainConfig(epochs=4, **tiny), patches)
    half = train(TrainConfig(epochs=2, **tiny), patches)
    half_ckpt = tmp_path / "half.cvfc"
    save_training_state(half_ckpt, half.model, half.optimizer, 2, TrainConfig(epochs=4, **tiny))
    model_h, opt_h, done, cfg_h = load_training_state(half_ckpt)
    resumed = train(cfg_h, patches, resume_from=(model_h, opt_h, done))
    resume_equal = json.dumps(full.history[2:]) == json.dumps(resumed.history)
    for name, p in full.model.params().items():
        resume_equal &= bool(np.array_equal(p.data, resumed.model.params()[name].data))

    ok = trace_equal and ckpt_equal and roundtrip_equal and resume_equal
    verdict(
        7,
        "determinism",
        ok,
        f"trace={trace_equal} ckpt={ckpt_equal} roundtrip={roundtrip_equal} resume={resume_equal}",
    )


# ---------------------------------------------------------------------------
# Criterion 8: CLI contract
# ---------------------------------------------------------------------------


def _cli(*args):
    return subprocess.run(
        [sys.executable, "-m", "cvfc", *args], capture_output=True, text=True, timeout=600
    )


def test_criterion_8_cli_contract(tmp_path):
    checks = {}

    synth_a = tmp_path / "a"
    synth_b = tmp_path / "b"
    checks["synth ok"] = _cli("synth", "--out", str(synth_a), "--count", "6", "--size", "16", "--seed", "5").returncode == 0
    checks["synth repeat ok"] = _cli("synth", "--out", str(synth_b), "--count", "6", "--size", "16", "--seed", "5").returncode == 0
    byte_equal = all(
        (synth_a / p.relative_to(synth_b)).read_bytes() == p.read_bytes()
        for p in sorted(synth_b.rglob("*"))
        if p.is_file()
    )
    checks["synth deterministic"] = byte_equal
    checks["synth count 0 -> 1"] = _cli("synth", "--out", str(tmp_path / "z"), "--count", "0").returncode == 1
    checks["unknown subcommand -> 1"] = _cli("bogus").returncode == 1
    checks["unknown flag -> 1"] = _cli("synth", "--out", "x", "--count", "1", "--wat").returncode == 1

    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(
        json.dumps(
            dict(
                seed=1, epochs=1, lr=0.01, weight_decay=0.01, batch_size=4,
                image_size=16, branch1="tiny38", branch2="tiny50", branch3="tiny38",
            )
        )
    )
    ckpt = tmp_path / "m.cvfc"
    checks["train missing config -> 1"] = _cli(
        "train", "--config", str(tmp_path / "none.json"), "--data", str(synth_a), "--out", str(ckpt)
    ).returncode == 1
    checks["train ok -> 0"] = _cli(
        "train", "--config", str(cfg_path), "--data", str(synth_a), "--out", str(ckpt)
    ).returncode == 0

    preds = tmp_path / "preds"
    checks["infer ok -> 0"] = _cli(
        "infer", "--ckpt", str(ckpt), "--images", str(synth_a / "images"), "--out", str(preds)
    ).returncode == 0
    broken = tmp_path / "broken.cvfc"
    raw = bytearray(ckpt.read_bytes())
    raw[-1] ^= 0xFF
    broken.write_bytes(bytes(raw))
    checks["infer corrupt ckpt -> 1"] = _cli(
        "infer", "--ckpt", str(broken), "--images", str(synth_a / "images"), "--out", str(tmp_path / "p2")
    ).returncode == 1

    checks["eval identity -> 0"] = _cli(
        "eval", "--pred", str(synth_a / "masks"), "--gt", str(synth_a / "masks")
    ).returncode == 0
    checks["eval unpaired -> 1"] = _cli(
        "eval", "--pred", str(synth_a / "masks"), "--gt", str(synth_a / "images")
    ).returncode == 1

    checks["gradcheck -> 0"] = _cli("gradcheck", "--seed", "2").returncode == 0

    failed = [k for k, ok in checks.items() if not ok]
    verdict(8, "CLI contract", not failed, f"{len(checks)} checks" + (f"; failed: {failed}" if failed else ""))
