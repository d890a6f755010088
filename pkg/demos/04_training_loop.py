"""Train the pocket-sized classifier on a separable synthetic set and
watch the pieces: momentum updates, the staircase learning rate, the
history table, and checkpoint round-tripping.

Run from the repository root:  python3 demos/04_training_loop.py
"""

import tempfile
from pathlib import Path

import numpy as np

from irrcnn import trainer
from irrcnn.checkpoint import load_checkpoint, restore_model
from irrcnn.model import ModelConfig, build_model
from irrcnn.trainer import TrainConfig, TrainData, lr_schedule


def main():
    rng = np.random.default_rng(42)
    x = rng.normal(size=(8, 3, 32, 32)).astype(np.float32)
    y = np.array([0, 1] * 4)
    x[y == 1] += 1.5  # class 1 tiles are brighter

    cfg = TrainConfig(initial_lr=0.05, momentum=0.9, decay=0.0,
                      epochs_per_trial=10, trials=2, batch_size=4,
                      seed=0, checkpoint_every=5, val_fraction=0.0)
    print("staircase schedule: " + ", ".join(
        f"epoch {e}: {lr_schedule(e, cfg):g}" for e in (0, 9, 10, 19)))
    print()

    model = build_model(ModelConfig(num_classes=2, input_shape=(3, 32, 32),
                                    stem_widths=(4, 8), block_widths=(16, 32),
                                    time_steps=1, dropout_p=0.0), seed=0)
    out_dir = Path(tempfile.mkdtemp(prefix="train-demo-"))
    history, state = trainer.train(model, TrainData(x, y), cfg, out_dir=out_dir)

    print(f"{'epoch':>5} {'lr':>8} {'loss':>10} {'accuracy':>9}")
    for epoch, lr, loss, acc, _ in history:
        marker = "  <- rate drop" if epoch == cfg.epochs_per_trial else ""
        print(f"{epoch:>5} {lr:>8g} {loss:>10.4f} {acc:>9.2%}{marker}")

    # the checkpoint on disk reproduces the live model bit for bit
    restored, velocities = restore_model(load_checkpoint(out_dir / "checkpoint.irrc"))
    live = trainer.predict_probs(model, x)
    again = trainer.predict_probs(restored, x)
    print()
    print(f"checkpoint round trip bit-exact: {np.array_equal(live, again)}")
    print(f"optimizer velocities restored for {len(velocities)} parameter tensors")
    print(f"artifacts under {out_dir}")


if __name__ == "__main__":
    main()
