"""Train the tiny model on the synthetic task, save it, load it, compare."""

# %%
import tempfile
from pathlib import Path

import numpy as np

from pyra.checkpoint import load_model, save_model
from pyra.config import RunConfig
from pyra.train import evaluate, train
from pyra.vit import count_params, forward

cfg = RunConfig(arch="tiny", schedule=[4, 3, 2, 1], epochs=10)
task = cfg.task()
state = cfg.build_model()
rep = count_params(state)
print(f"trainable {rep.trainable} (adapters {rep.adapters}, generators {rep.generators}, head {rep.head})")

# %%
print("val acc before:", evaluate(state, task.split("val"))[0])
result = train(state, task, cfg.train_config(), log=lambda rec: print(rec))
print("best val acc:", result.best_val_acc, "at epoch", result.best_epoch)
print("test acc:", evaluate(state, task.split("test"))[0])

# %% checkpoint round trip
with tempfile.TemporaryDirectory() as d:
    path = Path(d) / "tiny.pyra"
    n = save_model(path, state, cfg)
    back, cfg2 = load_model(path)
    imgs = task.split("test").images[:8]
    same = np.array_equal(forward(imgs, back).data, forward(imgs, state).data)
    print(f"{n} bytes written, reloaded logits identical: {same}")
