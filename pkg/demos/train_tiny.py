"""
Training a small network on planted segments
============================================

Generates a small synthetic corpus, trains for a few epochs and then asks the
model where a query happens. Runs in about a minute on one core.
"""
import tempfile

from tan2d.synthetic import CorpusSpec, generate_synthetic_corpus
from tan2d.text import Vocabulary
from tan2d.training import TrainConfig, build_dataset, evaluate, load_state, predict_top_n, train

# %% Data
root = tempfile.mkdtemp(prefix="tan2d_demo_")
manifest = generate_synthetic_corpus(root, seed=0, spec=CorpusSpec(n_videos=300, clip_range=(32, 48), d_in=16))
features = manifest.load_features()
train_m, val_m, test_m = (manifest.split(s) for s in ("train", "val", "test"))
vocab = Vocabulary.build(a.query for a in train_m.annotations)
print(f"{len(train_m.annotations)} training queries, vocabulary of {len(vocab)} words")

# %% Model and training
cfg = TrainConfig(n_clips=16, layers=2, kernel=5, d_s=32, d_v=32, d_o=32, lr=2e-3, epochs=20, batch_size=16)
train_ds, val_ds, test_ds = (build_dataset(m, vocab, cfg, features) for m in (train_m, val_m, test_m))
result = train(cfg, train_ds, val_ds, len(vocab))
for row in result.history:
    if row["split"] == "val":
        print(f"epoch {row['epoch']}: val loss {row['loss']:.4f}  Rank1@0.5 {row['rank1@0.5']:.1f}")

# %% Held-out accuracy with the best epoch's weights
load_state(result.model, result.best_state)
report = evaluate(result.model, test_ds)
print({k: round(v, 1) for k, v in report.ranks.items()})

# %% One query
ann = test_m.annotations[0]
preds, _ = predict_top_n(result.model, vocab, features[ann.video_id], ann.query, n=3)
print(f"{ann.query!r}: truth {ann.start_sec:.1f}-{ann.end_sec:.1f} s")
for p in preds:
    print(f"  {p.start_sec:5.1f}-{p.end_sec:5.1f} s  score {p.score:.3f}")
