"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed in the terminal summary (see conftest.py). The desk
models used by criteria 8 and 9 are cached under the pytest cache, keyed by a
hash of the package sources on the training path, so an unchanged tree reuses
them and any change retrains.
"""
import hashlib
import json
import os
import shutil
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_RESULTS
from lgaf.checkpoint import CheckpointError, load_checkpoint, restore_model, save_checkpoint
from lgaf.evaluation import identify, verify
from lgaf.experiments import correlation_study, desk_model_config, make_verification_split, train_desk_model, \
    verification_accuracy
from lgaf.gradcheck import CASES, TOLERANCE, run_suite
from lgaf.lgf import FusionState, lgf_forward, normalize_quality, update_ema
from lgaf.mhms import MHMS, MHMSConfig, msnet_forward
from lgaf.model import FUSION_MODES, assemble_model
from lgaf.data import gen_synthetic_faces
from lgaf.rng import RngStream
from lgaf.tensor import OPS, Tensor, arcface_logits, concat, conv2d, cosface_logits, flatten, linear, no_grad
from lgaf.training import _cosine_predictions

SEEDS = (0, 1, 2)
TRAINING_SOURCES = [
    "_fallback.py", "_kernels.pyx", "backbone.py", "checkpoint.py", "data.py", "degradation.py", "experiments.py",
    "gfe.py", "kernels.py", "lgf.py", "margin.py", "mhms.py", "model.py", "nn.py", "rng.py", "tensor.py",
    "training.py",
]


def record(number, title, passed, detail):
    ACCEPTANCE_RESULTS.append((number, title, bool(passed), detail))
    print(f"criterion {number} {'PASS' if passed else 'FAIL'}  {title}: {detail}")
    return passed


# ---------------------------------------------------------------- desk runs


def _source_digest():
    import lgaf
    root = os.path.dirname(lgaf.__file__)
    h = hashlib.sha256(b"desk-recipe-v1")
    for name in TRAINING_SOURCES:
        with open(os.path.join(root, name), "rb") as f:
            h.update(name.encode() + f.read())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def desk_dir(request):
    return request.config.cache.mkdir("lgaf-desk-runs") / _source_digest()


def desk_run(desk_dir, mode, seed):
    """Checkpoint directory and training seconds for one 30-epoch desk run (trained if not cached)."""
    out = desk_dir / f"{mode}_{seed}"
    info = out / "run.json"
    if not info.exists():
        if out.exists():
            shutil.rmtree(out)
        t0 = time.perf_counter()
        _, result = train_desk_model(mode, seed, out_dir=str(out))
        info.write_text(json.dumps({"seconds": time.perf_counter() - t0, "final_loss": result.final_loss}))
    return out / "checkpoint", json.loads(info.read_text())


# ---------------------------------------------------------------- 1


def test_c01_gradient_suite():
    t0 = time.perf_counter()
    results = run_suite(seeds=(0, 1, 2, 3, 4))
    seconds = time.perf_counter() - t0
    names = [r.name for r in results]
    worst = max(results, key=lambda r: r.max_rel_error)
    failed = [r.name for r in results if not r.passed]
    ok = not failed and set(OPS) <= set(names) and "pipeline" in names and seconds < 120
    record(1, "gradient suite", ok, f"{len(results)} cases, worst {worst.name} {worst.max_rel_error:.2e} "
                                     f"(tol {TOLERANCE:g}), failed {failed}, {seconds:.1f}s")
    assert ok


# ---------------------------------------------------------------- 2


def _random_batch(rng, kind):
    n, d = int(rng.integers(2, 17)), int(rng.integers(2, 9))
    fl, fg = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    if kind == "saturate":
        fl[0] *= 1e4  # one extreme norm pushes every standardized score into the clip
        fg[-1] *= 1e-4
    return fl, fg


def test_c02_lgf_invariants():
    rng = np.random.default_rng(2024)
    worst_sum, zhat_range, saturated, fallbacks = 0.0, [np.inf, -np.inf], 0, 0
    for i in range(1000):
        kind = ("plain", "saturate", "eval", "fallback")[i % 4]
        fl, fg = _random_batch(rng, kind)
        state = FusionState()
        if kind == "eval":
            state = FusionState(mu_l=float(rng.uniform(0, 5)), sigma_l=float(rng.uniform(0.01, 2)),
                                mu_g=float(rng.uniform(0, 5)), sigma_g=float(rng.uniform(0.01, 2)), mode="eval")
        if kind == "fallback":
            # both branches far below the running mean: both scores clip to 0
            state = FusionState(mu_l=1e6, sigma_l=1.0, mu_g=1e6, sigma_g=1.0, mode="eval")
        bundle, _ = lgf_forward(Tensor(fl), Tensor(fg), state)
        worst_sum = max(worst_sum, float(np.abs(bundle.gamma_local + bundle.gamma_global - 1).max()))
        for z in (bundle.zhat_local, bundle.zhat_global):
            zhat_range = [min(zhat_range[0], z.min()), max(zhat_range[1], z.max())]
            saturated += int(np.sum((z == 0) | (z == 2)))
        if kind == "fallback":
            fallbacks += int(np.all(bundle.gamma_local == 0.5))
    at_mean = [normalize_quality(np.array([mu]), mu, sd)[0] for mu, sd in rng.uniform(0.01, 10, size=(1000, 2))]
    exact_one = all(v == 1.0 for v in at_mean)
    ok = worst_sum <= 1e-6 and zhat_range[0] >= 0 and zhat_range[1] <= 2 and exact_one and saturated > 0 \
        and fallbacks == 250
    record(2, "LGF invariants", ok, f"max |gl+gg-1| {worst_sum:.1e}, zhat in [{zhat_range[0]:.3f}, {zhat_range[1]:.3f}], "
                                   f"{saturated} clipped scores, {fallbacks}/250 fallback batches, zhat(mu)=1 exact: {exact_one}")
    assert ok


# ---------------------------------------------------------------- 3


def test_c03_batch_scale_invariance():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(200):
        fl, fg = _random_batch(rng, "plain")
        base, _ = lgf_forward(Tensor(fl), Tensor(fg), FusionState())
        for c in (0.1, 10.0):
            scaled, _ = lgf_forward(Tensor(fl * c), Tensor(fg * c), FusionState())
            worst = max(worst, float(np.abs(scaled.gamma_local - base.gamma_local).max()),
                        float(np.abs(scaled.gamma_global - base.gamma_global).max()))
    ok = worst <= 1e-6
    record(3, "batch-scale invariance", ok, f"max gamma change {worst:.2e} over 200 batches x c in (0.1, 10)")
    assert ok


# ---------------------------------------------------------------- 4


def test_c04_ema_exactness():
    alpha = 0.01
    state = FusionState(mu_l=0.0, alpha=alpha)
    worst = 0.0
    for t in range(1, 2001):
        state = update_ema(state, 1.0, 1.0, "local")
        worst = max(worst, abs(state.mu_l - (1 - (1 - alpha) ** t)))
    one = update_ema(FusionState(mu_l=0.0, alpha=alpha), 1.0, 1.0, "local").mu_l
    ok = worst <= 1e-12 and one == pytest.approx(0.01, abs=1e-15)
    record(4, "EMA exactness", ok, f"max deviation from 1-(1-a)^t over 2000 steps {worst:.1e}; one step 0 -> {one!r}")
    assert ok


# ---------------------------------------------------------------- 5


def test_c05_margin_degeneracy():
    rng = np.random.default_rng(5)
    worst_equal = 0.0
    for _ in range(100):
        cos = Tensor(rng.uniform(-1, 1, size=(8, 10)))
        labels = rng.integers(0, 10, 8)
        a = arcface_logits(cos, labels, 64.0, 0.0).data
        c = cosface_logits(cos, labels, 64.0, 0.0).data
        worst_equal = max(worst_equal, float(np.abs(a - c).max()))
    # continuity of the target logit across the fallback switch at cos = cos(pi - m), s = 64, m = 0.5
    m, s = 0.5, 64.0
    switch = np.cos(np.pi - m)
    grid = np.concatenate([np.linspace(-1, 1, 200_001), switch + np.array([-1e-9, 1e-9])])
    grid.sort()
    target = arcface_logits(Tensor(grid[:, None]), np.zeros(len(grid), dtype=np.int64), s, m).data[:, 0]
    k = int(np.searchsorted(grid, switch))
    jump = float(abs(target[k] - target[k - 1]))
    equal_ok, cont_ok = worst_equal <= 1e-6, jump <= 1e-4
    record(5, "margin degeneracy", equal_ok and cont_ok,
           f"m=0 max |arcface-cosface| {worst_equal:.1e} ({'ok' if equal_ok else 'FAIL'}); "
           f"fallback jump at cos(pi-m) {jump:.4f} with s=64, m=0.5 ({'ok' if cont_ok else 'FAIL'})")
    assert equal_ok and cont_ok


# ---------------------------------------------------------------- 6


def test_c06_attention_identity_collapse():
    cfg = MHMSConfig(scales=(1, 3, 5), heads=4, embedding_dim=64, lanet_reduction=8, se_reduction=16)
    shape = (64, 4, 4)
    model = MHMS(cfg, shape, RngStream(6, name="init"), dtype=np.float64)
    x = Tensor(np.random.default_rng(6).normal(size=(3,) + shape))
    for h in model.heads:
        h.set_gate_override(1.0, 1.0)
    gated = model(x).data
    plain = []
    for h in model.heads:
        maps = [conv2d(x, w, b, padding=(k - 1) // 2) for k, w, b in zip(h.cfg.scales, h.conv_w, h.conv_b)]
        plain.append(linear(flatten(concat(maps, axis=1)), h.proj_w, h.proj_b))
    ref = concat(plain, axis=1).data
    worst = float(np.abs(gated - ref).max())
    ok = worst <= 1e-5
    record(6, "attention-identity collapse", ok, f"4 heads x 3 scales, max |gated - ungated| {worst:.1e}")
    assert ok


# ---------------------------------------------------------------- 7


def _clean_train_accuracy(model):
    data = gen_synthetic_faces(20, 50, (32, 32), seed=0)
    from lgaf.training import embed_dataset
    emb = embed_dataset(model, data.images)
    return float(np.mean(_cosine_predictions(model, emb.kappa) == data.labels))


@pytest.mark.slow
def test_c07_desk_training(desk_dir, tmp_path):
    ck_a, info_a = desk_run(desk_dir, "lgf", 0)
    t0 = time.perf_counter()
    _, result_b = train_desk_model("lgf", 0, out_dir=str(tmp_path / "again"))
    seconds_b = time.perf_counter() - t0
    blob_a = (ck_a / "tensors.bin").read_bytes()
    blob_b = (tmp_path / "again" / "checkpoint" / "tensors.bin").read_bytes()
    metrics_same = (ck_a.parent / "metrics.csv").read_bytes() == (tmp_path / "again" / "metrics.csv").read_bytes()
    reproducible = info_a["final_loss"] == result_b.final_loss and blob_a == blob_b and metrics_same
    model, _ = restore_model(ck_a)
    acc = _clean_train_accuracy(model)
    slowest = max(info_a["seconds"], seconds_b)
    ok = acc >= 0.95 and slowest <= 600 and reproducible
    record(7, "desk training", ok, f"train accuracy {acc:.4f} (eval mode, clean set), slowest run {slowest:.0f}s, "
                                  f"bit-reproducible {reproducible} (final loss {result_b.final_loss!r})")
    assert ok


# ---------------------------------------------------------------- 8


@pytest.mark.slow
def test_c08_ablation_ordering(desk_dir):
    splits = {k: make_verification_split(k) for k in ("occlusion", "deformation")}
    acc = {}
    for seed in SEEDS:
        for mode in FUSION_MODES:
            model, _ = restore_model(desk_run(desk_dir, mode, seed)[0])
            for kind, split in splits.items():
                acc[kind, mode, seed] = verification_accuracy(model, split)
    checks = {
        "occlusion lgf >= direct_add": [acc["occlusion", "lgf", s] >= acc["occlusion", "direct_add", s] for s in SEEDS],
        "occlusion local_only >= global_only":
            [acc["occlusion", "local_only", s] >= acc["occlusion", "global_only", s] for s in SEEDS],
        "deformation global_only >= local_only":
            [acc["deformation", "global_only", s] >= acc["deformation", "local_only", s] for s in SEEDS],
    }
    table = "; ".join(f"{kind[:5]} " + " ".join(f"{m}=" + "/".join(f"{acc[kind, m, s]:.3f}" for s in SEEDS)
                                               for m in FUSION_MODES) for kind in splits)
    votes = {name: sum(v) for name, v in checks.items()}
    ok = all(v >= 2 for v in votes.values())
    record(8, "ablation ordering", ok, ", ".join(f"{n} {v}/3" for n, v in votes.items()) + f" | {table}")
    assert ok


# ---------------------------------------------------------------- 9


@pytest.mark.slow
def test_c09_correlation_signs(desk_dir):
    per_seed = {}
    for seed in SEEDS:
        model, _ = restore_model(desk_run(desk_dir, "lgf", seed)[0])
        per_seed[seed] = correlation_study(model, n_probes=40, seed=seed)
    checks = {
        "blur r_local<0 and r_global<0": [per_seed[s]["blur"].r_local < 0 and per_seed[s]["blur"].r_global < 0
                                          for s in SEEDS],
        "occlusion r_global<r_local": [per_seed[s]["occlusion"].r_global < per_seed[s]["occlusion"].r_local
                                       for s in SEEDS],
        "deformation r_local<r_global": [per_seed[s]["deformation"].r_local < per_seed[s]["deformation"].r_global
                                         for s in SEEDS],
    }
    table = "; ".join(f"{k[:5]} " + " ".join(f"({per_seed[s][k].r_local:+.3f},{per_seed[s][k].r_global:+.3f})"
                                            for s in SEEDS) for k in ("blur", "occlusion", "deformation"))
    votes = {name: sum(v) for name, v in checks.items()}
    ok = all(v >= 2 for v in votes.values())
    record(9, "correlation signs", ok, ", ".join(f"{n} {v}/3" for n, v in votes.items())
           + f" | (r_local,r_global) per seed {table}")
    assert ok


# ---------------------------------------------------------------- 10


def test_c10_protocol_invariance():
    rng = np.random.default_rng(10)
    labels = np.repeat(np.arange(30), 6)
    emb = np.eye(32)[labels] * 1.5 + rng.normal(size=(len(labels), 32))
    pairs = [(int(a), int(b), bool(labels[a] == labels[b])) for a, b in rng.integers(0, len(labels), size=(600, 2))]
    pairs = [p for p in pairs if p[0] != p[1]]
    worst_v = 0.0
    base = verify(pairs, emb, 10)
    for k in range(5):
        q, _ = np.linalg.qr(np.random.default_rng(100 + k).normal(size=(32, 32)))
        worst_v = max(worst_v, abs(verify(pairs, emb @ q, 10) - base))
    gal, probe = emb[::2], emb[1::2]
    gid, pid = labels[::2], labels[1::2]
    ref = identify(gal, gid, probe, pid, (1, 3, 5))
    worst_i = max(max(abs(identify(gal * c, gid, probe * d, pid, (1, 3, 5))[k] - ref[k]) for k in ref)
                  for c, d in [(0.01, 7.0), (3.0, 3.0), (250.0, 0.5)])
    ok = worst_v <= 1e-6 and worst_i == 0.0
    record(10, "protocol invariance", ok, f"verify accuracy {base:.4f}, max change under rotation {worst_v:.1e}; "
                                         f"rank-k change under scaling {worst_i}")
    assert ok


# ---------------------------------------------------------------- 11


def test_c11_persistence(tmp_path):
    from lgaf.training import TrainConfig, train
    data = gen_synthetic_faces(4, 8, (32, 32), seed=11)
    model = assemble_model(desk_model_config(4), "lgf", seed=11)
    train(model, data.images, data.labels, TrainConfig(total_epochs=1, batch_size=16, seed=11))
    x = data.images[:6]
    with no_grad():
        before = model.embed(x).kappa.data.copy()
    save_checkpoint(tmp_path / "ck", model)
    loaded, _ = restore_model(tmp_path / "ck")
    with no_grad():
        after = loaded.embed(x).kappa.data
    bit_exact = before.tobytes() == after.tobytes() and loaded.fusion_state == model.fusion_state
    rejected = []
    for name, corrupt in (("truncated", lambda b: b[:-4]), ("flipped", lambda b: b[:10] + bytes([b[10] ^ 1]) + b[11:])):
        shutil.copytree(tmp_path / "ck", tmp_path / name)
        blob = (tmp_path / name / "tensors.bin").read_bytes()
        (tmp_path / name / "tensors.bin").write_bytes(corrupt(blob))
        try:
            load_checkpoint(tmp_path / name)
        except CheckpointError as exc:
            rejected.append("checksum" in str(exc))
        else:
            rejected.append(False)
    ok = bit_exact and all(rejected)
    record(11, "persistence", ok, f"save/load/forward bit-exact {bit_exact}; corrupted blobs rejected {rejected}")
    assert ok


# ---------------------------------------------------------------- 12


def test_c12_parameter_audit(tmp_path):
    cfg = desk_model_config(20)
    models = {m: assemble_model(cfg, m, seed=0) for m in FUSION_MODES}
    count = {m: sum(p.data.size for _, p in mod.named_parameters()) for m, mod in models.items()}
    shared = sum(p.data.size for n, p in models["lgf"].named_parameters() if n.startswith(("backbone.", "margin.")))
    keys = {}
    for m in ("direct_add", "lgf"):
        save_checkpoint(tmp_path / m, models[m])
        keys[m] = set(load_checkpoint(tmp_path / m)[0]["tensors"])
    extra = count["lgf"] - (count["local_only"] + count["global_only"] - shared)
    ok = extra == 0 and count["lgf"] == count["direct_add"] and keys["lgf"] == keys["direct_add"]
    record(12, "parameter audit", ok, f"lgf {count['lgf']} params = local_only {count['local_only']} + global_only "
                                     f"{count['global_only']} - shared {shared} + {extra}; checkpoint key-sets equal "
                                     f"{keys['lgf'] == keys['direct_add']} ({len(keys['lgf'])} tensors)")
    assert ok
