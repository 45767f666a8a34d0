import copy
import math

import numpy as np
import pytest
import torch

from tsgrounding.datamodel import ConfigError, MomentAnnotation, SyntheticSpec, VideoFeatures, stable_hash
from tsgrounding.harness import IOU_THRESHOLDS, TrainConfig, TrainingError, iou, load_config, recall_at_iou, train
from tsgrounding.harness.config import apply_overrides
from tsgrounding.harness.data import build_examples, collate, synthetic_data
from tsgrounding.harness.evaluation import OracleModel, alignment_score, evaluate, evaluate_model
from tsgrounding.harness.training import example_key, lr_factor
from tsgrounding.model import Batch, GroundingModel
from tsgrounding.objectives import LossWeights
from tsgrounding.pin import contrastive_loss

from .oracles import count_recall, interval_iou

TINY = dict(T=16, D=16, num_heads=2, embed_dim=16, batch_size=8, save_checkpoints=False)


@pytest.fixture(scope="module")
def small():
    return synthetic_data(SyntheticSpec(num_pairs=40, T=16, D_in=16, planted_snr=2.0, seed=0), T=16)


# -- metrics -----------------------------------------------------------------------

def test_iou_examples():
    assert iou((2, 6), (2, 6)) == 1.0
    assert iou((0, 1), (2, 3)) == 0.0
    assert iou((2, 6), (4, 8)) == pytest.approx(2 / 6)
    assert iou((3, 3), (3, 3)) == 1.0
    with pytest.raises(ValueError):
        iou((5, 1), (0, 2))


def test_iou_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        a = tuple(np.sort(rng.integers(0, 8, 2)).astype(float))
        b = tuple(np.sort(rng.uniform(0, 8, 2)))
        got = iou(a, b)
        assert got == pytest.approx(interval_iou(a, b), abs=1e-12)
        assert 0 <= got <= 1 and got == pytest.approx(iou(b, a), abs=1e-12)


def test_recall_examples():
    assert recall_at_iou([0.8, 0.4], 0.5) == 50.0
    assert all(recall_at_iou([1.0, 1.0], m) == 100.0 for m in IOU_THRESHOLDS)
    assert recall_at_iou([0.7], 0.7) == 0.0
    with pytest.raises(ValueError):
        recall_at_iou([], 0.5)
    with pytest.raises(ValueError):
        recall_at_iou([0.5], 1.0)


def test_recall_matches_counting_and_is_monotone():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        ious = (rng.integers(0, 11, int(rng.integers(1, 30))) / 10).tolist()
        got = [recall_at_iou(ious, m) for m in IOU_THRESHOLDS]
        assert got == [count_recall(ious, m) for m in IOU_THRESHOLDS]
        assert got[0] >= got[1] >= got[2] and all(0 <= g <= 100 for g in got)


# -- configuration -----------------------------------------------------------------

def test_config_defaults():
    c = TrainConfig()
    assert (c.epochs, c.batch_size, c.learning_rate, c.grad_clip_norm) == (50, 16, 5e-4, 1.0)
    assert (c.K, c.N_prompt, c.D, c.T, c.M_percent) == (3, 2, 128, 128, 30.0)


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text('{"epochs": 3, "lambda4": 0.0, "use_prompt": false}')
    cfg = load_config(path, {"seed": "7", "lambda1": "2.5"})
    assert cfg.epochs == 3 and cfg.seed == 7 and not cfg.use_prompt
    assert cfg.loss_weights == LossWeights(lambda1=2.5, lambda4=0.0)
    assert not cfg.uses_pseudo_queries


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(None, {"learning_rat": 1})
    with pytest.raises(ConfigError):
        apply_overrides({}, {"nope": 1})
    (tmp_path / "bad.json").write_text("{epochs: 3")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")
    with pytest.raises(ConfigError):
        TrainConfig(lr_schedule="step")
    with pytest.raises(ConfigError):
        TrainConfig(M_percent=150)


def test_lr_schedules():
    assert lr_factor("linear", 0, 10) == 1.0 and lr_factor("linear", 10, 10) == 0.0
    assert lr_factor("constant", 7, 10) == 1.0
    assert lr_factor("cosine", 5, 10) == pytest.approx(0.5)
    lin = [lr_factor("linear", s, 20) for s in range(21)]
    assert all(a >= b for a, b in zip(lin, lin[1:]))


# -- training ----------------------------------------------------------------------

def test_training_is_deterministic(small, tmp_path):
    cfg = TrainConfig(epochs=2, seed=3, **TINY)
    train(cfg, small.train, small.vocab, small.objects, tmp_path / "a")
    train(cfg, small.train, small.vocab, small.objects, tmp_path / "b")
    a, b = (tmp_path / "a" / "metrics.csv").read_bytes(), (tmp_path / "b" / "metrics.csv").read_bytes()
    assert a == b and len(a.splitlines()) == 3
    header = a.splitlines()[0].decode()
    assert header == "epoch,l_pre,l_bound,l_con,l_key,total,iou@0.3,iou@0.5,iou@0.7"


def test_gradient_clipping_bound(small):
    cfg = TrainConfig(epochs=2, grad_clip_norm=0.05, **{**TINY, "batch_size": 4})
    res = train(cfg, small.train, small.vocab, small.objects)
    fired = [s for s in res.steps if s.grad_norm > cfg.grad_clip_norm]
    assert fired, "clipping never fired"
    for s in res.steps:
        assert s.clipped_norm <= cfg.grad_clip_norm + 1e-6


def test_checkpoint_written(small, tmp_path):
    cfg = TrainConfig(epochs=1, **{**TINY, "save_checkpoints": True})
    res = train(cfg, small.train, small.vocab, small.objects, tmp_path)
    ckpt = torch.load(res.checkpoint, weights_only=False)
    assert ckpt["seed"] == cfg.seed and ckpt["train_config"]["T"] == 16 and ckpt["vocab"] == small.vocab.itos


def test_nan_loss_aborts_with_coordinates(small):
    broken = copy.deepcopy(small.train)
    broken[-1].video.features[0, 0] = np.inf
    cfg = TrainConfig(epochs=1, **TINY)
    with pytest.raises(TrainingError, match=r"epoch 0 batch \d+"):
        train(cfg, broken, small.vocab, small.objects)


def test_baseline_configuration_skips_pseudo_queries(small):
    cfg = TrainConfig(epochs=1, use_prompt=False, loss_weights=LossWeights(lambda4=0.0), **TINY)
    res = train(cfg, small.train, small.vocab, small.objects)
    assert not hasattr(res.model, "pool")
    assert all(row["l_con"] == 0 and row["l_key"] == 0 for row in res.history)


def test_target_stops_early(small):
    cfg = TrainConfig(epochs=5, target_train_iou7=0.0, **TINY)
    assert len(train(cfg, small.train, small.vocab, small.objects).history) == 1


def test_key_pull_retrieval_is_stable(small):
    cfg = TrainConfig(epochs=6, **TINY)
    res = train(cfg, small.train, small.vocab, small.objects)
    batch = collate(small.train, small.vocab, small.objects, cfg.M_percent, stable_hash(cfg.seed, cfg.epochs - 1))
    with torch.no_grad():
        idx = res.model.eval()(batch, use_pseudo=True).prompt_index.tolist()
    same = sum(res.prompt_usage[example_key(e)] == i for e, i in zip(small.train, idx))
    assert same / len(idx) >= 0.9


def test_contrastive_steps_raise_alignment():
    data = synthetic_data(SyntheticSpec(num_pairs=80, T=16, D_in=16, planted_snr=2.0, seed=1), T=16)
    torch.manual_seed(0)
    model = GroundingModel(TrainConfig(**TINY).model_config(16, len(data.vocab)))
    before = alignment_score(model, data.val, data.vocab)
    opt = torch.optim.Adam(model.parameters(), lr=5e-4)
    rng = np.random.default_rng(0)
    for step in range(50):
        chunk = [data.train[i] for i in rng.choice(len(data.train), 16, replace=False)]
        batch = collate(chunk, data.vocab, data.objects, 30.0, step)
        out = model.train()(batch)
        loss = contrastive_loss(out.v_tilde, out.p_tilde, out.epsilon)
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert alignment_score(model, data.val, data.vocab) > before


# -- evaluation --------------------------------------------------------------------

def test_oracle_model_scores_full_recall(small):
    ev = evaluate_model(OracleModel(), small.val, small.vocab)
    assert all(v == 100.0 for v in ev.iou_at.values())


def test_evaluation_is_repeatable(small):
    torch.manual_seed(0)
    model = GroundingModel(TrainConfig(**TINY).model_config(16, len(small.vocab)))
    a, b = evaluate_model(model, small.val, small.vocab), evaluate_model(model, small.val, small.vocab)
    assert a.iou_at == b.iou_at and a.per_sample == b.per_sample
    assert a.iou_at[0.3] >= a.iou_at[0.5] >= a.iou_at[0.7]


def test_untrained_model_floor():
    scores = []
    for seed in range(3):
        data = synthetic_data(SyntheticSpec(num_pairs=60, T=48, D_in=64, planted_snr=2.0, seed=seed), T=48)
        torch.manual_seed(seed)
        model = GroundingModel(TrainConfig(T=48, D=32, num_heads=4, embed_dim=64).model_config(64, len(data.vocab)))
        scores.append(evaluate_model(model, data.train + data.val, data.vocab).iou_at[0.7])
    assert np.mean(scores) < 20


def test_evaluate_checkpoint_and_dimension_mismatch(small, tmp_path):
    cfg = TrainConfig(epochs=1, **{**TINY, "save_checkpoints": True})
    res = train(cfg, small.train, small.vocab, small.objects, tmp_path)
    pairs = [(e.video, e.annotation) for e in small.val]
    ev = evaluate(res.checkpoint, pairs)
    assert ev.iou_at == evaluate_model(res.model, small.val, small.vocab).iou_at
    wrong = [(VideoFeatures(v.video_id, v.features[:, :8], v.frame_mask, v.duration_sec), a) for v, a in pairs]
    with pytest.raises(ValueError, match="dim"):
        evaluate(res.checkpoint, wrong)


def test_per_sample_csv(small, tmp_path):
    ev = evaluate_model(OracleModel(), small.val, small.vocab)
    ev.write_csv(tmp_path / "e.csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "video_id,pred_start,pred_end,gt_start,gt_end,iou" and len(lines) == len(small.val) + 1
    assert "IoU@0.5" in ev.table()


def test_padding_does_not_change_predictions(small):
    torch.manual_seed(0)
    model = GroundingModel(TrainConfig(**TINY).model_config(16, len(small.vocab))).eval()
    b = collate(small.val, small.vocab, with_pseudo=False)
    B = b.video.shape[0]
    s, e, o = model.predict(b)
    for pad_t, pad_l in ((1, 0), (0, 4), (7, 3)):
        b2 = Batch(
            video=torch.cat([b.video, torch.zeros(B, pad_t, b.video.shape[2])], 1),
            v_mask=torch.cat([b.v_mask, torch.zeros(B, pad_t, dtype=torch.bool)], 1),
            query=torch.cat([b.query, torch.zeros(B, pad_l, dtype=torch.long)], 1),
            q_mask=torch.cat([b.q_mask, torch.zeros(B, pad_l, dtype=torch.bool)], 1),
        )
        s2, e2, o2 = model.predict(b2)
        assert torch.equal(s, s2) and torch.equal(e, e2)
        T = b.video.shape[1]
        for name in ("p_start", "p_end", "p_highlight"):
            assert (getattr(o.pgmf, name) - getattr(o2.pgmf, name)[:, :T]).abs().max() <= 1e-6


def test_resampled_examples_keep_labels_consistent():
    vid = VideoFeatures("v", np.random.default_rng(0).standard_normal((40, 4)), np.ones(40, bool), 20.0)
    ex = build_examples([(vid, MomentAnnotation("v", 5.0, 10.0, ["q"], 20.0))], 8)[0]
    assert ex.video.features.shape == (8, 4)
    assert (ex.labels.start, ex.labels.end) == (2, 3)
    assert math.isclose(ex.labels.y_match.max(), 1.0)
