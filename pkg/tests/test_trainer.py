import json
import math

import numpy as np
import pytest
import torch

from deepwavenet.datasets import PreparationPolicy, scan_paired_dirs
from deepwavenet.losses import LossWeights
from deepwavenet.model import CheckpointError, DeepWaveNet, ModelConfig, Variant, load_checkpoint, save_checkpoint
from deepwavenet.synthetic import write_paired_dataset
from deepwavenet.trainer import (
    NonFiniteLossError,
    TrainConfig,
    batch_indices,
    evaluate,
    evaluate_inputs,
    evaluate_model,
    finetune,
    run_ablation,
    total_steps,
    train,
)


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    dirs = write_paired_dataset(root, n=10, height=16, width=16, seed=5)
    return scan_paired_dirs(*dirs, name="toy", policy=PreparationPolicy.preset("native"))


@pytest.fixture(scope="module")
def coastal(tmp_path_factory):
    root = tmp_path_factory.mktemp("coastal")
    dirs = write_paired_dataset(root, n=8, height=16, width=16, seed=9, water="coastal")
    return scan_paired_dirs(*dirs, name="coastal", policy=PreparationPolicy.preset("native"))


def tiny(**kw):
    base = dict(
        model=ModelConfig(branch_width=4, cbam_reduction=2, seed=1),
        loss=LossWeights(0.0, 0.0),
        batch_size=4,
        max_steps=6,
        max_epochs=None,
        lr=1e-3,
    )
    base.update(kw)
    return TrainConfig(**base)


def test_batch_order_is_a_function_of_seed_and_epoch():
    seen = np.concatenate([batch_indices(3, s, 10, 4) for s in (1, 2, 3)])
    assert sorted(seen) == list(range(10))  # one epoch covers every pair once
    assert np.array_equal(batch_indices(3, 4, 10, 4), batch_indices(3, 4, 10, 4))
    assert total_steps(tiny(max_steps=None, max_epochs=2), 10) == 6
    assert total_steps(tiny(max_steps=4, max_epochs=2), 10) == 4


def test_config_validation():
    with pytest.raises(ValueError):
        tiny(lr=0.0)
    with pytest.raises(ValueError):
        tiny(batch_size=0)
    with pytest.raises(ValueError):
        tiny(max_steps=None, max_epochs=None)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": 1})
    cfg = tiny()
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_loss_decreases_over_200_steps(toy, extractor):
    cfg = tiny(loss=LossWeights(0.02, 0.5), batch_size=5, max_steps=200, lr=2e-3, model=ModelConfig(branch_width=8, seed=0))
    log = train(cfg, toy, extractor=extractor).log
    total = np.array([e["total"] for e in log])
    smooth = np.convolve(total, np.ones(20) / 20, mode="valid")
    assert smooth[-1] < 0.5 * smooth[0]
    thirds = [smooth[i * len(smooth) // 3 : (i + 1) * len(smooth) // 3].mean() for i in range(3)]
    assert thirds[0] > thirds[1] > thirds[2]


def test_zero_lambdas_total_equals_l2(toy):
    for e in train(tiny(), toy).log:
        assert e["total"] == e["l2"] and e["lp"] == 0 and e["lssim"] == 0


def test_log_file_and_checkpoints(toy, tmp_path):
    cfg = tiny(checkpoint_every=3, checkpoint_dir=str(tmp_path), log_path=str(tmp_path / "log.jsonl"),
               eval_every=2)
    result = train(cfg, toy, val_manifest=toy)
    lines = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [l["step"] for l in lines] == list(range(1, 7))
    assert set(lines[0]) == {"step", "l2", "lp", "lssim", "total", "lr", "wall_time"}
    assert sorted(p.name for p in tmp_path.glob("*.pt")) == ["best.pt", "final.pt", "step_0000003.pt", "step_0000006.pt"]
    assert result.best_val_psnr is not None
    _, payload = load_checkpoint(result.checkpoint)
    assert payload["step"] == 6 and json.loads(payload["train_config"])["lr"] == 1e-3


def test_resume_matches_uninterrupted_run(toy, tmp_path):
    cfg = tiny(schedule="cosine", checkpoint_every=3, checkpoint_dir=str(tmp_path / "a"))
    full = train(cfg, toy)
    resumed = train(tiny(schedule="cosine"), toy, resume_from=str(tmp_path / "a" / "step_0000003.pt"))
    assert resumed.step == 6
    key = lambda log: [(e["step"], e["l2"], e["total"], e["lr"]) for e in log]
    assert key(resumed.log) == key(full.log)
    for a, b in zip(full.model.state_dict().values(), resumed.model.state_dict().values()):
        assert torch.equal(a, b)


def test_identical_runs_identical_logs(toy):
    a, b = train(tiny(), toy).log, train(tiny(), toy).log
    strip = lambda log: [{k: v for k, v in e.items() if k != "wall_time"} for e in log]
    assert strip(a) == strip(b)


def test_vanishing_lr_leaves_parameters(toy):
    model = DeepWaveNet(tiny().model)
    before = {k: v.clone() for k, v in model.named_parameters()}
    train(tiny(max_steps=1, lr=1e-300), toy, model=model)
    for k, p in model.named_parameters():
        assert torch.equal(p, before[k]), k


def test_non_finite_loss_names_batch(toy):
    class Poisoned:
        def __len__(self):
            return 10

        def batch(self, idx):
            x = torch.rand(len(idx), 3, 16, 16)
            return x, torch.full_like(x, float("nan"))

    with pytest.raises(NonFiniteLossError, match="step 1"):
        train(tiny(), toy, dataset=Poisoned())


def test_empty_manifest_rejected(toy):
    with pytest.raises(ValueError):
        train(tiny(), toy.subset([]))


def test_finetune_zero_steps_is_identity(toy, tmp_path):
    base = tmp_path / "base.pt"
    model = DeepWaveNet(tiny().model)
    save_checkpoint(model, base)
    result = finetune(base, toy, tiny(max_steps=0))
    for a, b in zip(model.state_dict().values(), result.model.state_dict().values()):
        assert torch.equal(a, b)


def test_finetune_rejects_mismatch(toy, tmp_path):
    base = tmp_path / "base.pt"
    save_checkpoint(DeepWaveNet(ModelConfig(branch_width=4, cbam_reduction=2, scale_factor=2)), base)
    with pytest.raises(CheckpointError, match="scale_factor"):
        finetune(base, toy, tiny())
    save_checkpoint(DeepWaveNet(ModelConfig(branch_width=4, cbam_reduction=2, variant=Variant.WAVENET_3)), base)
    with pytest.raises(CheckpointError, match="variant"):
        finetune(base, toy, tiny())


def test_finetune_improves_train_psnr(toy, coastal, tmp_path):
    pre = train(tiny(max_steps=60, checkpoint_dir=str(tmp_path)), toy)
    before = evaluate_model(pre.model, coastal, ("psnr",)).mean("psnr")
    tuned = finetune(pre.checkpoint, coastal, tiny(max_steps=50))
    after = evaluate_model(tuned.model, coastal, ("psnr",)).mean("psnr")
    print(f"coastal train PSNR {before:.2f} -> {after:.2f} dB")
    assert after > before


def test_evaluate_writes_images_and_report(toy, tmp_path):
    ckpt = tmp_path / "m.pt"
    save_checkpoint(DeepWaveNet(tiny().model), ckpt)
    report = evaluate(ckpt, toy, ("psnr", "uiqm"), out_dir=tmp_path / "out")
    assert len(report.records) == 10
    assert len(list((tmp_path / "out").glob("*.png"))) == 10
    assert (tmp_path / "out" / "metrics.csv").exists()
    assert report.metadata["checkpoint"] == str(ckpt)
    assert math.isfinite(evaluate_inputs(toy, ("psnr",)).mean("psnr"))


def test_ablation_single_row_and_fairness(toy, coastal, extractor):
    one = run_ablation(tiny(max_steps=2), toy, coastal, variants=[Variant.WAVENET_1], loss_combos=[],
                       metrics=("psnr",))
    assert [r["image_id"] for r in one.records] == ["variant:WAVENET_1"]
    grid = run_ablation(tiny(max_steps=2), toy, coastal, variants=[Variant.FULL, Variant.WAVENET_M],
                        loss_combos=["l2", "l2+lp+lssim"], metrics=("psnr",), extractor=extractor)
    runs = grid.metadata["runs"]
    assert len(grid.records) == 4
    assert len({(r["seed"], r["model_seed"], r["steps"]) for r in runs.values()}) == 1
    assert runs["loss:l2+lp+lssim"]["lambda_p"] == 0.02 and runs["loss:l2+lp+lssim"]["lambda_s"] == 0.5
