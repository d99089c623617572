import json
import os
import struct

import numpy as np
import pytest

from s2ldm.errors import CorruptCheckpointError, UnsupportedVersionError
from s2ldm.pipeline import (RunConfig, emit_pgm, load_checkpoint, parse_config, pgm_bytes,
                            save_checkpoint, train_stage1, train_stage2)
from s2ldm.pipeline import train as tr
from s2ldm.pipeline.cli import main
from s2ldm.pipeline.io import dumps, loads
from s2ldm.similarity import cosine_map, dynamic_mask

TINY = RunConfig(seed=3, patch_size=32, ae_steps=4, ae_batch=2, diff_epochs=2, diff_batch=2,
                 diff_steps_per_epoch=2, T=10)


@pytest.fixture(scope="module")
def pairs():
    return tr.generate_pairs(10, 32, 5)


# -- container -----------------------------------------------------------------

def _three(rng):
    return {"a": rng.normal(size=(2, 3)).astype(np.float32), "b": rng.normal(size=(4,)),
            "c": np.arange(6, dtype=np.int64).reshape(3, 2, 1)}


def test_roundtrip_bit_exact(tmp_path, rng):
    t = _three(rng)
    path = tmp_path / "x.s2t1"
    save_checkpoint(path, t, {"stage": "diff", "T": 100, "beta_1": 1e-4})
    ck = load_checkpoint(path)
    for k, v in t.items():
        assert ck.tensors[k].dtype == v.dtype
        assert ck.tensors[k].tobytes() == v.tobytes() and ck.tensors[k].shape == v.shape
    assert ck.stage == "diff" and ck.metadata["T"] == 100 and ck.metadata["beta_1"] == 1e-4
    assert dumps(ck.tensors, ck.metadata) == path.read_bytes()


def test_layout_is_documented(rng):
    data = dumps({"w": np.array([1.5], dtype=np.float64)})
    assert data[:4] == b"S2T1"
    assert struct.unpack("<II", data[4:12]) == (1, 1)
    assert struct.unpack("<H", data[12:14]) == (1,) and data[14:15] == b"w"
    assert data[15:17] == bytes([1, 1])
    assert struct.unpack("<Q", data[17:25]) == (1,)
    assert struct.unpack("<d", data[25:]) == (1.5,)


def test_truncation_always_detected(rng):
    data = dumps(_three(rng), {"stage": "ae"})
    for n in range(len(data)):
        with pytest.raises(CorruptCheckpointError):
            loads(data[:n])


def test_corruptions_name_the_field(rng):
    data = bytearray(dumps(_three(rng)))
    v2 = bytes(data[:4]) + struct.pack("<I", 2) + bytes(data[8:])
    with pytest.raises(UnsupportedVersionError) as exc:
        loads(v2)
    assert exc.value.field == "version"
    with pytest.raises(CorruptCheckpointError) as exc:
        loads(b"S2T0" + bytes(data[4:]))
    assert exc.value.field == "magic"
    with pytest.raises(CorruptCheckpointError) as exc:
        loads(bytes(data) + b"\0")
    assert exc.value.field == "trailer"
    bad = bytearray(data)
    bad[15] = 9  # dtype code of the first entry ("a" has a 1-byte name)
    with pytest.raises(CorruptCheckpointError) as exc:
        loads(bytes(bad))
    assert "dtype" in exc.value.field


def test_metadata_validation(rng):
    with pytest.raises(ValueError):
        dumps({"a": np.zeros(1)}, {"a": 1})
    with pytest.raises(ValueError):
        dumps({}, {"stage": "other"})
    with pytest.raises(ValueError):
        dumps({}, {"name": "text"})
    with pytest.raises(ValueError):
        dumps({"s": np.float64(1.0)})
    with pytest.raises(ValueError):
        dumps({"z": np.zeros(2, dtype=np.complex128)})


def test_pgm_mapping(tmp_path):
    assert pgm_bytes(np.zeros((2, 3))) == b"P5\n3 2\n255\n" + bytes([128] * 6)
    assert pgm_bytes(np.ones((1, 2)))[-2:] == bytes([255, 255])
    assert pgm_bytes(-np.ones((1, 1)))[-1] == 0
    path = emit_pgm(np.array([[0.5, -0.5]]), tmp_path / "m.pgm")
    assert open(path, "rb").read() == b"P5\n2 1\n255\n" + bytes([191, 64])
    for bad in (np.full((2, 2), 1.01), np.zeros(3), np.array([[np.nan]])):
        with pytest.raises(ValueError):
            pgm_bytes(bad)


# -- config --------------------------------------------------------------------

def test_config_parse():
    cfg = parse_config("# comment\nseed = 4\nlambda_s = 0.5  # trailing\n\nT = 100\n")
    assert cfg.seed == 4 and cfg.lambda_s == 0.5 and cfg.T == 100 and cfg.sampler_t_start == 50
    assert parse_config(cfg.to_text()) == cfg
    for text in ("sedd = 1", "seed = 1\nseed = 2", "seed 1", "seed = x", "T = 0", "alpha = -1"):
        with pytest.raises(ValueError):
            parse_config(text)


# -- stage 1 -------------------------------------------------------------------

def test_stage1_requires_pairs(pairs):
    with pytest.raises(ValueError):
        train_stage1(TINY, pairs[:7])


def test_stage1_deterministic(pairs):
    a = train_stage1(TINY, pairs)
    b = train_stage1(TINY, pairs)
    assert a.curve == b.curve and len(a.curve) == 4
    assert tr.params_digest(a.model) == tr.params_digest(b.model)
    assert set(a.curve[0]) >= {"l_auto", "l_rec", "l_quan", "l_sim"}


def test_stage1_lambda_s_shares_step0_reconstruction(pairs):
    a = train_stage1(TINY.replace(lambda_s=0.0), pairs, steps=1)
    b = train_stage1(TINY.replace(lambda_s=0.1), pairs, steps=1)
    assert a.curve[0]["l_rec"] == b.curve[0]["l_rec"]


@pytest.mark.slow
def test_stage1_loss_decreases():
    data = tr.generate_pairs(16, 64, 7)
    res = train_stage1(RunConfig(seed=7, patch_size=32, ae_lr=1e-3), data, steps=500)
    first = np.mean([r["l_auto"] for r in res.curve[:20]])
    last = np.mean([r["l_auto"] for r in res.curve[-20:]])
    assert last < first


# -- stage 2 -------------------------------------------------------------------

def test_stage2_mask_schedule_and_frozen_ae(pairs):
    ae = train_stage1(TINY, pairs).model
    before = tr.params_digest(ae)
    cfg = TINY.replace(diff_epochs=10, diff_steps_per_epoch=1, patch_size=0)
    res = train_stage2(cfg, pairs, ae)
    assert tr.params_digest(ae) == before
    sched = res.mask_schedule
    assert [r["epoch"] for r in sched] == list(range(11))
    means = [r["mean_mask"] for r in sched]
    assert all(b >= a for a, b in zip(means, means[1:]))
    assert all(m == 1.0 for m in means[5:])
    e_n, e_c = res.latents
    for r in sched:
        recomputed = dynamic_mask(cosine_map(e_n, e_c), r["epoch"], 10, 2.0).mean()
        assert abs(recomputed - r["mean_mask"]) < 1e-6
    again = train_stage2(cfg, pairs, ae)
    assert again.curve == res.curve
    assert len(res.curve) == 10


def test_checkpoint_roundtrip_preserves_translation(pairs, tmp_path):
    ae = train_stage1(TINY, pairs).model
    dm = train_stage2(TINY.replace(patch_size=0), pairs, ae).model
    save_checkpoint(tmp_path / "ae.s2t1", *_parts(tr.ae_to_checkpoint(ae)))
    save_checkpoint(tmp_path / "d.s2t1", *_parts(tr.diff_to_checkpoint(dm)))
    ae2 = tr.ae_from_checkpoint(load_checkpoint(tmp_path / "ae.s2t1"))
    dm2 = tr.diff_from_checkpoint(load_checkpoint(tmp_path / "d.s2t1"))
    xs = [tr.normalize_pair(p, TINY)[0] for p in pairs[:2]]
    a = tr.translate_images(xs, ae, dm, 1, 5)
    b = tr.translate_images(xs, ae2, dm2, 1, 5)
    for x, y in zip(a, b):
        assert x.tobytes() == y.tobytes()
    with pytest.raises(ValueError):
        tr.ae_from_checkpoint(load_checkpoint(tmp_path / "d.s2t1"))


def _parts(ck):
    return ck.tensors, ck.metadata


# -- CLI -----------------------------------------------------------------------

def test_cli_usage_errors(capsys):
    assert main([]) == 1
    assert main(["gen", "--n", "3", "--out", "x", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main(["frobnicate"]) == 1


def test_cli_runtime_errors(tmp_path):
    assert main(["eval", "--pred", str(tmp_path / "none.s2t1"), "--target", "x",
                 "--report", str(tmp_path / "r.json")]) == 2
    (tmp_path / "junk.s2t1").write_bytes(b"nope")
    assert main(["simmap", "--in", str(tmp_path / "junk.s2t1"), "--ae", str(tmp_path / "junk.s2t1"),
                 "--out", str(tmp_path / "m.pgm")]) == 2


def test_cli_chain(tmp_path):
    d = tmp_path / "data"
    assert main(["gen", "--n", "10", "--size", "32", "--seed", "1", "--out", str(d)]) == 0
    manifest = json.loads((d / "manifest.json").read_text())
    assert len(manifest["files"]) == 10 and len(manifest["train"]) == 8
    assert sorted(os.listdir(d)) == sorted(manifest["files"] + ["manifest.json"])
    cfg = tmp_path / "run.cfg"
    cfg.write_text("ae_steps = 3\nae_batch = 2\ndiff_epochs = 2\ndiff_steps_per_epoch = 2\nT = 10\n")
    ae, dif = tmp_path / "ae.s2t1", tmp_path / "diff.s2t1"
    assert main(["train-ae", "--data", str(d), "--config", str(cfg), "--seed", "2", "--out", str(ae),
                 "--log", str(tmp_path / "ae.json")]) == 0
    assert len(json.loads((tmp_path / "ae.json").read_text())["curve"]) == 3
    assert main(["train-diff", "--data", str(d), "--ae", str(ae), "--config", str(cfg), "--seed", "2",
                 "--out", str(dif), "--log", str(tmp_path / "diff.json")]) == 0
    assert load_checkpoint(dif).metadata["t_start_default"] == 5
    one = d / manifest["val"][0]
    for out in ("y1.s2t1", "y2.s2t1"):
        assert main(["translate", "--in", str(one), "--ae", str(ae), "--diff", str(dif),
                     "--seed", "3", "--out", str(tmp_path / out)]) == 0
    assert (tmp_path / "y1.s2t1").read_bytes() == (tmp_path / "y2.s2t1").read_bytes()
    assert load_checkpoint(tmp_path / "y1.s2t1").stage == "pred"
    assert main(["translate", "--in", str(d), "--ae", str(ae), "--diff", str(dif), "--seed", "3",
                 "--t-start", "0", "--out", str(tmp_path / "preds")]) == 0
    rep = tmp_path / "r.json"
    assert main(["eval", "--pred", str(tmp_path / "preds"), "--target", str(d), "--report", str(rep)]) == 0
    report = json.loads(rep.read_text())
    assert set(report) == {"nmae", "nmse", "psnr_db", "psnr_exact", "ssim", "n_images"}
    assert report["n_images"] == 10
    pgm = tmp_path / "s.pgm"
    assert main(["simmap", "--in", str(one), "--ae", str(ae), "--out", str(pgm), "--upsample"]) == 0
    assert pgm.read_bytes().startswith(b"P5\n32 32\n255\n") and len(pgm.read_bytes()) == 13 + 32 * 32
    assert main(["translate", "--in", str(one), "--ae", str(ae), "--diff", str(dif),
                 "--t-start", "11", "--out", str(tmp_path / "bad.s2t1")]) == 2
