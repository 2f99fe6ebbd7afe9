import logging, sys
from stylecodes import datagen, trainer
logging.basicConfig(level=logging.INFO, stream=sys.stderr)
ds = datagen.build_dataset(64, 64, seed=0)
datagen.attach_holdout(ds, 0.25, seed=0)
datagen.write_dataset(ds, "artifacts/desk/dataset")
train, _ = datagen.split_from_manifest(ds)
cfg = trainer.TrainConfig(phase="pretrain", steps=5000, batch_size=32, seed=0, eval_every=500)
trainer.pretrain_base(train, cfg, out="artifacts/desk/base.sckp", log_path="artifacts/desk/pretrain.jsonl")
