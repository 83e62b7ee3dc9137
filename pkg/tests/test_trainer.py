import csv
import math
from dataclasses import replace

import numpy as np
import pytest

from osplab.checkpoint import CheckpointError, load_checkpoint, read_manifest, save_checkpoint
from osplab.config import TrainConfig
from osplab.model import ModelConfig, init_params
from osplab.optim import AdamState, Hyper, lr_multiplier
from osplab.trainer import METRICS_HEADER, TrainingDiverged, init_train_state, read_metrics, train

SMALL = ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ffn=32, max_seq_len=32)


def small_config(corpus, steps=12, **kw):
    base = dict(corpus=str(corpus), total_tokens=steps * 4 * 32, model=SMALL, batch_size=4, seq_len=32,
                eval_interval=4, diagnostics_interval=4, eval_sequences=2, mode="muon_decoupled",
                hyper=Hyper(adam_lr=3e-3, muon_lr=3e-3), dtype="float64", record_wall_time=False)
    base.update(kw)
    return TrainConfig(**base)


def states_equal(a, b):
    if a.step != b.step or a.rng != b.rng or a.config != b.config or a.model != b.model:
        return False
    if any(not np.array_equal(a.params[k], b.params[k]) for k in a.params) or a.params.keys() != b.params.keys():
        return False
    for k, ta in a.opt.tensors.items():
        tb = b.opt.tensors[k]
        if type(ta) is not type(tb):
            return False
        fields = ("m", "v") if isinstance(ta, AdamState) else ("buf",)
        if any(not np.array_equal(getattr(ta, f), getattr(tb, f)) for f in fields):
            return False
        if isinstance(ta, AdamState) and ta.t != tb.t:
            return False
    return True


# --- checkpoints

@pytest.mark.parametrize("dtype", ["float32", "float64"])
@pytest.mark.parametrize("mode", ["adam_all", "muon_decoupled"])
def test_checkpoint_round_trip(tmp_path, text_corpus, dtype, mode):
    res = train(small_config(text_corpus, steps=3, dtype=dtype, mode=mode), tmp_path / "run")
    loaded = load_checkpoint(res.checkpoint_path)
    assert states_equal(res.state, loaded)
    save_checkpoint(loaded, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == res.checkpoint_path.read_bytes()


def test_manifest_is_readable_and_complete(tmp_path, text_corpus):
    res = train(small_config(text_corpus, steps=2), tmp_path / "run")
    manifest, _ = read_manifest(res.checkpoint_path)
    head = res.checkpoint_path.read_bytes().split(b"\n", 2)
    assert head[0] == b"OSPLAB-CKPT 1"
    n_params = len(res.state.params)
    n_opt = sum(2 if isinstance(t, AdamState) else 1 for t in res.state.opt.tensors.values())
    assert len(manifest["tensors"]) == n_params + n_opt
    assert manifest["step"] == 2 and manifest["rng"]["position"] > 0


def test_corrupt_byte_detected(tmp_path, text_corpus):
    res = train(small_config(text_corpus, steps=1), tmp_path / "run")
    blob = bytearray(res.checkpoint_path.read_bytes())
    blob[-10] ^= 0xFF
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(bad)


def test_truncated_and_foreign_files(tmp_path, text_corpus):
    res = train(small_config(text_corpus, steps=1), tmp_path / "run")
    blob = res.checkpoint_path.read_bytes()
    (tmp_path / "short.ckpt").write_bytes(blob[:-100])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "short.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"hello world")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt")
    (tmp_path / "v2.ckpt").write_bytes(blob.replace(b"OSPLAB-CKPT 1", b"OSPLAB-CKPT 2", 1))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v2.ckpt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


# --- training loop

def test_zero_steps_checkpoint_is_initialization(tmp_path, text_corpus):
    cfg = small_config(text_corpus)
    res = train(cfg, tmp_path / "run", stop_at=0)
    assert res.state.step == 0
    assert states_equal(load_checkpoint(res.checkpoint_path), init_train_state(cfg))


def test_metrics_schema_and_lr_column(tmp_path, text_corpus):
    cfg = small_config(text_corpus, steps=12, warmup_steps=2)
    res = train(cfg, tmp_path / "run")
    with open(res.metrics_path) as fh:
        assert next(csv.reader(fh)) == METRICS_HEADER
    rows = read_metrics(res.metrics_path)
    assert [r["step"] for r in rows] == [0, 4, 8, 12]
    for r in rows:
        assert r["lr_mult"] == lr_multiplier(r["step"], cfg.schedule)
        assert r["tokens_seen"] == r["step"] * 128
        assert r["wall_ms"] == 0
    assert rows[0]["eval_loss"] == pytest.approx(math.log(257), abs=1e-6)
    assert rows[0]["train_loss"] == pytest.approx(math.log(257), abs=1e-6)


def test_runs_are_bit_identical(tmp_path, text_corpus):
    cfg = small_config(text_corpus, steps=8)
    a = train(cfg, tmp_path / "a")
    b = train(cfg, tmp_path / "b")
    assert a.metrics_path.read_bytes() == b.metrics_path.read_bytes()
    assert a.checkpoint_path.read_bytes() == b.checkpoint_path.read_bytes()


@pytest.mark.parametrize("mode", ["adam_all", "muon_decoupled", "muon_all"])
def test_resume_is_bit_exact(tmp_path, text_corpus, mode):
    cfg = small_config(text_corpus, steps=10, mode=mode)
    full = train(cfg, tmp_path / "full")
    part = train(cfg, tmp_path / "part", stop_at=6)
    assert part.checkpoint_path.name == "step_000006.ckpt"
    resumed = train(cfg, tmp_path / "part", resume=load_checkpoint(part.checkpoint_path))
    assert states_equal(full.state, resumed.state)
    assert full.metrics_path.read_bytes() == resumed.metrics_path.read_bytes()


def test_periodic_checkpoints(tmp_path, text_corpus):
    res = train(small_config(text_corpus, steps=8, checkpoint_interval=3), tmp_path / "run")
    names = sorted(p.name for p in (tmp_path / "run").glob("*.ckpt"))
    assert names == ["final.ckpt", "step_000003.ckpt", "step_000006.ckpt"]
    assert load_checkpoint(tmp_path / "run" / "step_000003.ckpt").step == 3
    assert res.state.step == 8


def test_divergence_aborts(tmp_path, text_corpus):
    cfg = small_config(text_corpus, steps=4, mode="adam_all")
    state = init_train_state(cfg)
    state.params["layers.0.wq"][0, 0] = np.nan
    with pytest.raises(TrainingDiverged) as exc:
        train(cfg, tmp_path / "run", resume=state)
    assert exc.value.step == 0 and exc.value.record()["loss"] == "nan"


def test_two_hundred_steps_beat_uniform(tmp_path):
    rs = np.random.default_rng(0)
    words = [b"the", b"of", b"and", b"king", b"love", b"night", b"sweet", b"lord", b"thou", b"art", b"queen"]
    text = b" ".join(words[i] for i in rs.integers(0, len(words), 300000))[: 2**20]
    (tmp_path / "c.txt").write_bytes(text)
    model = ModelConfig(n_layers=2, d_model=64, n_heads=4, d_ffn=256, max_seq_len=64)
    cfg = TrainConfig(corpus=str(tmp_path / "c.txt"), total_tokens=200 * 8 * 64, model=model, batch_size=8,
                      seq_len=64, mode="muon_decoupled", hyper=Hyper(adam_lr=3e-3, muon_lr=3e-3),
                      eval_interval=100, diagnostics_interval=100)
    rows = read_metrics(train(cfg, tmp_path / "run").metrics_path)
    assert rows[-1]["step"] == 200
    assert rows[-1]["train_loss"] < math.log(257)
    assert rows[-1]["eval_loss"] < rows[0]["eval_loss"]
