import logging, sys
from stylecodes import datagen, trainer
from stylecodes.model import load_model
logging.basicConfig(level=logging.INFO, stream=sys.stderr)
ds = datagen.load_dataset("artifacts/desk/dataset")
train, _ = datagen.split_from_manifest(ds)
base = load_model("artifacts/desk/base.sckp")
assert base.meta["train"]["steps"] == 5000
cfg = trainer.TrainConfig(phase="joint", steps=5000, batch_size=32, seed=0, eval_every=500)
trainer.train_stylecodes(train, base, cfg, out="artifacts/desk/joint.sckp", log_path="artifacts/desk/joint.jsonl")
