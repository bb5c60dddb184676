"""Adam, the seeded training loop, divergence handling and checkpoints."""
import dataclasses

import numpy as np
import pytest

from rome import tensor as tn
from rome.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from rome.data import ClipRecord, Corpus, synth_corpus
from rome.model import RetrievalModel
from rome.tensor import Tape, Tensor
from rome.trainer import (AdamState, ConfigError, TrainConfig, TrainingDiverged, epoch_batches, initial_model,
                          model_from_checkpoint, optimizer_step, train)

TOY = dict(model_dim=16, word_dim=8, heads=2, batch_size=8, eval_every=0, lr=1e-3)


@pytest.fixture(scope="module")
def toy_corpus():
    return synth_corpus(7, 16, d2=8, d3=8, vocab_size=40, n_classes=4)


def params_of(model):
    return {k: v.data.copy() for k, v in model.params.items()}


class TestConfig:
    @pytest.mark.parametrize("change, message", [
        ({"batch_size": 1}, "batch_size"), ({"epochs": 0}, "epochs"), ({"margin": 0.0}, "margin"),
        ({"weighting": "max"}, "average, text_only, video_only, both"), ({"design": "x"}, "mixed, self_all"),
        ({"features": "rgb"}, "2d_only, split, concat"), ({"precision": "float16"}, "float32 or float64")])
    def test_rejects(self, change, message):
        with pytest.raises(ConfigError, match=message):
            TrainConfig(**change)

    def test_heads_must_divide(self, toy_corpus):
        with pytest.raises(ConfigError, match="divisible"):
            TrainConfig(model_dim=10, heads=4).model_config(toy_corpus)


class TestAdam:
    def test_zero_gradient(self):
        p = {"w": Tensor(np.array([1.0, -2.0]))}
        state = AdamState(1, {"w": np.array([0.5, 0.5], np.float32)}, {"w": np.array([0.25, 0.25], np.float32)})
        before = p["w"].data.copy()
        optimizer_step(p, {"w": np.zeros(2, np.float32)}, state, 1e-3)
        np.testing.assert_allclose(state.m["w"], 0.45)
        np.testing.assert_allclose(state.v["w"], 0.25 * 0.999)
        # the decayed first moment still moves the parameter; only a fresh state stays put
        fresh = {"w": Tensor(before)}
        optimizer_step(fresh, {"w": np.zeros(2, np.float32)}, AdamState(), 1e-3)
        np.testing.assert_array_equal(fresh["w"].data, before)

    def test_first_step_is_signed_lr(self, f64):
        p = {"w": Tensor(np.array([0.0, 0.0, 0.0]))}
        optimizer_step(p, {"w": np.array([3.0, -0.01, 250.0])}, AdamState(), 0.1)
        np.testing.assert_allclose(p["w"].data, [-0.1, 0.1, -0.1], rtol=1e-5)

    def test_identical_sets_identical_updates(self, rng):
        g = rng.normal(size=(3, 3)).astype(np.float32)
        a, b = {"w": Tensor(np.ones((3, 3)))}, {"w": Tensor(np.ones((3, 3)))}
        optimizer_step(a, {"w": g}, AdamState(), 0.01)
        optimizer_step(b, {"w": g.copy()}, AdamState(), 0.01)
        np.testing.assert_array_equal(a["w"].data, b["w"].data)

    def test_non_finite_gradient(self):
        with pytest.raises(FloatingPointError, match="w"):
            optimizer_step({"w": Tensor(np.ones(2))}, {"w": np.array([1.0, np.inf])}, AdamState(), 0.1)

    def test_shape_mismatch(self):
        with pytest.raises(tn.DimensionError):
            optimizer_step({"w": Tensor(np.ones(2))}, {"w": np.ones(3)}, AdamState(), 0.1)


class TestBatches:
    def test_every_clip_once(self, toy_corpus):
        batches = epoch_batches(toy_corpus, 5, np.random.default_rng(0))
        clips = [i for b, _ in batches for i in b]
        assert sorted(clips) == list(range(15))  # 16 clips in 5s: the trailing single is dropped
        assert all(toy_corpus.truth()[c] == i for b, caps in batches for i, c in zip(b, caps))


class TestTrain:
    def test_lr_zero_leaves_parameters(self, toy_corpus):
        cfg = TrainConfig(**dict(TOY, lr=0.0, epochs=2))
        before = params_of(initial_model(toy_corpus, cfg)[0])
        after = params_of(train(toy_corpus, cfg).model)
        for k in before:
            np.testing.assert_array_equal(before[k], after[k])

    def test_deterministic(self, toy_corpus):
        cfg = TrainConfig(**dict(TOY, epochs=3, eval_every=1))
        a, b = train(toy_corpus, cfg), train(toy_corpus, cfg)
        assert [h.line() for h in a.history] == [h.line() for h in b.history]
        for k, v in params_of(a.model).items():
            np.testing.assert_array_equal(v, b.model.params[k].data)

    def test_loss_drops_on_separable_corpus(self):
        corpus = synth_corpus(7, 64, d2=16, d3=16, vocab_size=64, n_classes=8)
        cfg = TrainConfig(model_dim=32, word_dim=16, heads=4, batch_size=16, epochs=20, lr=1e-4, eval_every=0)
        history = train(corpus, cfg).history
        assert min(h.loss for h in history[1:]) < history[0].loss
        assert history[-1].loss < history[0].loss

    def test_fixed_batch_loss_non_increasing(self, toy_corpus):
        cfg = TrainConfig(**dict(TOY, lr=1e-4))
        model, _ = initial_model(toy_corpus, cfg)
        clips, caps = toy_corpus.clips[:8], toy_corpus.captions[:8]
        state, losses = AdamState(), []
        for _ in range(6):
            with Tape() as tape:
                loss = model.batch_loss(clips, caps, cfg.margin)
            tape.backward(loss, model.params.values())
            losses.append(loss.item())
            optimizer_step(model.params, {k: p.grad for k, p in model.params.items()}, state, cfg.lr)
        assert all(b <= a for a, b in zip(losses, losses[1:]))

    def test_resume_continues_bitwise(self, toy_corpus, tmp_path):
        cfg = TrainConfig(**dict(TOY, epochs=4))
        straight = train(toy_corpus, cfg)
        half = train(toy_corpus, cfg.replace(epochs=2))
        save_checkpoint(half.checkpoint, tmp_path / "c.bin")
        resumed = train(toy_corpus, cfg, resume=load_checkpoint(tmp_path / "c.bin"))
        assert [h.epoch for h in resumed.history] == [3, 4]
        assert [h.line() for h in half.history + resumed.history] == [h.line() for h in straight.history]

    def test_divergence_keeps_last_good(self, toy_corpus, monkeypatch):
        calls = {"n": 0}
        real = RetrievalModel.batch_loss

        def flaky(self, clips, graphs, margin):
            calls["n"] += 1
            out = real(self, clips, graphs, margin)
            return out * Tensor(np.nan) if calls["n"] > 2 else out
        monkeypatch.setattr(RetrievalModel, "batch_loss", flaky)
        with pytest.raises(TrainingDiverged, match="epoch 2") as info:
            train(toy_corpus, TrainConfig(**dict(TOY, epochs=3)))
        assert info.value.checkpoint.epoch == 1


class TestGradientFlow:
    def test_every_group_receives_gradient(self, toy_corpus):
        # two time steps per expert, so self-attention query/key weights are live
        rng = np.random.default_rng(0)
        clips = [ClipRecord(c.clip_id, *(np.stack([f, f + rng.normal(size=f.shape)])
                                         for f in (c.feature_2d, c.feature_3d, c.feature_roi)))
                 for c in toy_corpus.clips[:4]]
        cfg = TrainConfig(**dict(TOY, weighting="both", features="split"))
        model, _ = initial_model(toy_corpus, cfg)
        with Tape() as tape:
            loss = model.batch_loss(clips, toy_corpus.captions[:4], cfg.margin)
        tape.backward(loss, model.params.values())
        dead = [k for k, p in model.params.items() if not np.any(p.grad)]
        assert dead == []

    def test_video_only_leaves_text_heads_unused(self, toy_corpus):
        cfg = TrainConfig(**dict(TOY, weighting="video_only"))
        model, _ = initial_model(toy_corpus, cfg)
        with Tape() as tape:
            loss = model.batch_loss(toy_corpus.clips[:4], toy_corpus.captions[:4], cfg.margin)
        tape.backward(loss, model.params.values())
        assert not np.any(model.params["match.text_heads"].grad)
        assert np.any(model.params["match.video_heads"].grad)


class TestCheckpoint:
    @pytest.fixture
    def trained(self, toy_corpus):
        return train(toy_corpus, TrainConfig(**dict(TOY, epochs=1)))

    def test_round_trip_forward(self, trained, toy_corpus, tmp_path):
        save_checkpoint(trained.checkpoint, tmp_path / "c.bin")
        back = load_checkpoint(tmp_path / "c.bin")
        assert back.rng_state == trained.checkpoint.rng_state and back.epoch == 1
        model = model_from_checkpoint(back)
        v0, t0 = trained.model.encode_videos(toy_corpus.clips), trained.model.encode_texts(toy_corpus.captions)
        v1, t1 = model.encode_videos(toy_corpus.clips), model.encode_texts(toy_corpus.captions)
        np.testing.assert_array_equal(trained.model.scores(v0, t0).data, model.scores(v1, t1).data)
        for k in trained.checkpoint.adam_m:
            np.testing.assert_array_equal(back.adam_m[k], trained.checkpoint.adam_m[k])

    def test_float64_width(self, trained, tmp_path):
        ck = dataclasses.replace(trained.checkpoint,
                                 params={k: v.astype(np.float64) for k, v in trained.checkpoint.params.items()})
        save_checkpoint(ck, tmp_path / "c.bin")
        assert next(iter(load_checkpoint(tmp_path / "c.bin").params.values())).dtype == np.float64

    def test_truncated(self, trained, tmp_path):
        path = tmp_path / "c.bin"
        save_checkpoint(trained.checkpoint, path)
        path.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_corrupt_byte(self, trained, tmp_path):
        path = tmp_path / "c.bin"
        save_checkpoint(trained.checkpoint, path)
        data = bytearray(path.read_bytes())
        data[len(data) // 2] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)

    def test_version_mismatch(self, trained, tmp_path):
        path = tmp_path / "c.bin"
        save_checkpoint(trained.checkpoint, path)
        data = bytearray(path.read_bytes())
        data[8] = 99
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="version 99"):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "c.bin").write_bytes(b"NOTACKPT" + bytes(40))
        with pytest.raises(CheckpointError, match="not a checkpoint"):
            load_checkpoint(tmp_path / "c.bin")

    def test_unknown_key(self, trained, tmp_path):
        ck = dataclasses.replace(trained.checkpoint, params=dict(trained.checkpoint.params, **{"video.extra": np.ones(2, np.float32)}))
        save_checkpoint(ck, tmp_path / "c.bin")
        with pytest.raises(CheckpointError, match=r"unknown keys \['video.extra'\]"):
            model_from_checkpoint(load_checkpoint(tmp_path / "c.bin"))

    def test_failed_save_leaves_old_file(self, trained, tmp_path, monkeypatch):
        path = tmp_path / "c.bin"
        save_checkpoint(trained.checkpoint, path)
        before = path.read_bytes()
        bad = dataclasses.replace(trained.checkpoint, config={"x": object()})
        with pytest.raises(TypeError):
            save_checkpoint(bad, path)
        assert path.read_bytes() == before
        assert [p.name for p in tmp_path.iterdir()] == ["c.bin"]
