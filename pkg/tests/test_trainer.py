import copy
import json
import math

import pytest
import torch

from conftest import tiny_config
from obow.bow_targets import build_targets
from obow.encoder import ConfigError, student_forward, teacher_forward
from obow.prediction_head import PredictionConfig, generate_weights, predict_bow
from obow.trainer import (
    CHECKPOINT_VERSION,
    CheckpointError,
    NonFiniteLossError,
    TrainConfig,
    TrainState,
    bow_loss,
    epoch_batches,
    load_checkpoint,
    lr_schedule,
    make_batch,
    prefill_vocabularies,
    read_metrics,
    run_training,
    save_checkpoint,
    train_step,
)

D = torch.float64


def test_bow_loss_examples():
    one_hot = torch.tensor([0.0, 1.0, 0.0], dtype=D)
    assert float(bow_loss(one_hot, one_hot)) == 0.0
    u = torch.full((7,), 1 / 7, dtype=D)
    assert float(bow_loss(u, u)) == pytest.approx(math.log(7), abs=1e-12)
    val = bow_loss(torch.tensor([0.25, 0.75], dtype=D), torch.tensor([0.5, 0.5], dtype=D))
    assert float(val) == pytest.approx(0.8370, abs=1e-4)
    with pytest.raises(ValueError):
        bow_loss(torch.tensor([0.5, 0.6]), torch.tensor([0.5, 0.5]))
    # a zero predicted entry is clamped, not infinite
    assert math.isfinite(float(bow_loss(torch.tensor([1.0, 0.0], dtype=D), torch.tensor([0.5, 0.5], dtype=D))))


def test_lr_schedule_examples():
    assert lr_schedule(0, 100, 10, 0.05) == 0.0
    assert lr_schedule(10, 100, 10, 0.05) == 0.05
    assert lr_schedule(100, 100, 10, 0.05, 0.001) == pytest.approx(0.001, abs=1e-15)
    assert lr_schedule(55, 100, 10, 1.0) == pytest.approx(0.5, abs=1e-12)
    assert lr_schedule(0, 100, 0, 0.05) == 0.05
    with pytest.raises(ValueError):
        lr_schedule(101, 100, 10, 0.05)
    with pytest.raises(ValueError):
        lr_schedule(5, 10, 10, 0.05)


def test_config_validation(tmp_path):
    for bad in (dict(vocab_size=1), dict(batch_size=0), dict(lr=0.0), dict(levels=("L-2",)), dict(head="mlp")):
        with pytest.raises(ConfigError):
            tiny_config(tmp_path, **bad)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"vocab_sz": 3})


def test_config_file_round_trip(tmp_path):
    cfg = tiny_config(tmp_path, levels=("L",), reduction="avg")
    path = tmp_path / "cfg.yaml"
    import yaml

    path.write_text(yaml.safe_dump(cfg.to_dict()))
    assert TrainConfig.from_file(path) == cfg
    jpath = tmp_path / "cfg.json"
    jpath.write_text(json.dumps(cfg.to_dict()))
    assert TrainConfig.from_file(jpath) == cfg


def _ready_state(tmp_path, dataset, **kw):
    state = TrainState(tiny_config(tmp_path, **kw))
    state.total_steps = 6
    prefill_vocabularies(state, dataset)
    return state


def _batch(state, dataset, epoch=0, i=0):
    idx = epoch_batches(state.config, len(dataset), epoch)[i]
    return make_batch(dataset, idx, state.config, epoch)


def test_train_step_requires_prefill(tmp_path, tiny_dataset):
    state = TrainState(tiny_config(tmp_path))
    with pytest.raises(RuntimeError):
        train_step(state, _batch(state, tiny_dataset))


def test_frozen_teacher_with_alpha_one(tmp_path, tiny_dataset):
    state = _ready_state(tmp_path, tiny_dataset, alpha0=1.0)
    before = copy.deepcopy(state.teacher.state_dict())
    for i in range(2):
        train_step(state, _batch(state, tiny_dataset, 0, i))
    for name, p in state.teacher.named_parameters():
        assert torch.equal(p, before[name])


def test_queue_insertion_counts_batch(tmp_path, tiny_dataset):
    state = _ready_state(tmp_path, tiny_dataset)
    before = {lv: v.insertion_index for lv, v in state.vocabs.items()}
    rec = train_step(state, _batch(state, tiny_dataset))
    for lv, v in state.vocabs.items():
        assert v.insertion_index == before[lv] + 4
    assert rec["step"] == 0 and state.step == 1
    assert set(rec) >= {"loss", "level_loss", "alpha", "lr", "delta", "vocab"}
    assert set(rec["vocab"]["L"]) == {"assignment_entropy", "min_usage", "max_usage", "oldest_word_age"}


def test_single_view_loss_recomputed(tmp_path, tiny_dataset):
    state = _ready_state(tmp_path, tiny_dataset, levels=("L",), num_primary=1, patches_drawn=0)
    batch = _batch(state, tiny_dataset)
    twin = copy.deepcopy(state)
    rec = train_step(state, batch)
    teacher_x = torch.stack([b.teacher_view for b in batch]).to(D)
    student_x = torch.stack([b.primary_views[0] for b in batch]).to(D)
    targets = build_targets(teacher_forward(twin.teacher, teacher_x), twin.vocabs, twin.trackers)
    pooled = student_forward(twin.student, student_x).pooled
    y_S = predict_bow(pooled, generate_weights(twin.heads["L"], twin.vocabs["L"]), PredictionConfig(5.0))
    assert rec["loss"] == pytest.approx(float(bow_loss(y_S, targets["L"].target.probs).detach()), abs=1e-12)


def test_teacher_view_switch_adds_one_term(tmp_path, tiny_dataset):
    state = _ready_state(tmp_path, tiny_dataset, levels=("L",), num_primary=1, patches_drawn=0,
                         student_sees_teacher_view=True)
    batch = _batch(state, tiny_dataset)
    twin = copy.deepcopy(state)
    rec = train_step(state, batch)
    teacher_x = torch.stack([b.teacher_view for b in batch]).to(D)
    student_x = torch.stack([b.primary_views[0] for b in batch]).to(D)
    probs = build_targets(teacher_forward(twin.teacher, teacher_x), twin.vocabs, twin.trackers)["L"].target.probs
    weights = generate_weights(twin.heads["L"], twin.vocabs["L"])
    losses = [bow_loss(predict_bow(student_forward(twin.student, x).pooled, weights, PredictionConfig(5.0)), probs)
              for x in (student_x, teacher_x)]
    assert rec["loss"] == pytest.approx(float(sum(losses).detach()) / 2, abs=1e-12)


def test_no_gradient_reaches_teacher_or_words(tmp_path, tiny_dataset):
    state = _ready_state(tmp_path, tiny_dataset)
    train_step(state, _batch(state, tiny_dataset))
    assert all(p.grad is None for p in state.teacher.parameters())
    assert all(not v.words.requires_grad and v.words.grad is None for v in state.vocabs.values())
    assert all(p.grad is not None for p in state.heads.parameters())


def test_initial_loss_bound(tmp_path, tiny_dataset):
    state = _ready_state(tmp_path, tiny_dataset)
    rec = train_step(state, _batch(state, tiny_dataset))
    assert rec["loss"] <= math.log(8) + 1


def test_non_finite_loss_aborts(tmp_path, tiny_dataset):
    state = _ready_state(tmp_path, tiny_dataset)
    with torch.no_grad():
        next(state.student.parameters()).fill_(float("nan"))
    with pytest.raises((NonFiniteLossError, ValueError)):
        train_step(state, _batch(state, tiny_dataset))


@pytest.mark.parametrize("balance", ["replace_rare", "sinkhorn"])
def test_kmeans_mode_step(tmp_path, tiny_dataset, balance):
    state = _ready_state(tmp_path, tiny_dataset, vocab_mode="kmeans", kmeans_balance=balance, sinkhorn_iters=50)
    words = {lv: v.words.clone() for lv, v in state.vocabs.items()}
    rec = train_step(state, _batch(state, tiny_dataset))
    assert math.isfinite(rec["loss"])
    assert any(not torch.equal(words[lv], state.vocabs[lv].words) for lv in words)


def test_fixed_head_step(tmp_path, tiny_dataset):
    state = _ready_state(tmp_path, tiny_dataset, head="fixed")
    rec = train_step(state, _batch(state, tiny_dataset))
    assert math.isfinite(rec["loss"])


def test_checkpoint_round_trip(tmp_path, tiny_dataset):
    state = _ready_state(tmp_path, tiny_dataset)
    train_step(state, _batch(state, tiny_dataset))
    path = save_checkpoint(state, tmp_path / "ck.pt")
    loaded = load_checkpoint(path)
    for a, b in zip(state.student.state_dict().values(), loaded.student.state_dict().values()):
        assert torch.equal(a, b)
    for lv in state.vocabs:
        assert torch.equal(state.vocabs[lv].words, loaded.vocabs[lv].words)
        assert state.vocabs[lv].insertion_index == loaded.vocabs[lv].insertion_index
    batch = _batch(state, tiny_dataset, 0, 1)
    assert train_step(state, batch) == train_step(loaded, batch)


def test_checkpoint_errors(tmp_path, tiny_dataset):
    state = _ready_state(tmp_path, tiny_dataset)
    sd = state.state_dict()
    sd["version"] = CHECKPOINT_VERSION + 1
    torch.save(sd, tmp_path / "future.pt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "future.pt")
    (tmp_path / "junk.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.pt")


def test_zero_epoch_run(tmp_path, tiny_dataset):
    art = run_training(tiny_config(tmp_path, epochs=0), tiny_dataset)
    assert art.checkpoint.exists() and read_metrics(art.metrics) == []
    assert load_checkpoint(art.checkpoint).prefilled


def test_metrics_line_count_and_determinism(tmp_path, tiny_dataset):
    a = run_training(tiny_config(tmp_path / "a"), tiny_dataset)
    b = run_training(tiny_config(tmp_path / "b"), tiny_dataset)
    ra, rb = read_metrics(a.metrics), read_metrics(b.metrics)
    assert len(ra) == 2 * (len(tiny_dataset) // 4)
    assert ra == rb


def test_resume_matches(tmp_path, tiny_dataset):
    full = run_training(tiny_config(tmp_path / "full", epochs=3), tiny_dataset)
    cfg = tiny_config(tmp_path / "part", epochs=3)
    part = run_training(cfg, tiny_dataset, stop_after_epochs=1)
    run_training(cfg, tiny_dataset, resume=part.output_dir / "checkpoint_epoch001.pt")
    assert read_metrics(full.metrics) == read_metrics(part.metrics)
