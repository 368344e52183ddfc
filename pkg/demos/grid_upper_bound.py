"""
How much does the clip grid cost?
=================================

Even a perfect scorer can only return candidate moments, so the grid
resolution caps Rank1. This computes that ceiling on a synthetic corpus.
"""
import tempfile

from tan2d.evaluation import upper_bound
from tan2d.synthetic import CorpusSpec, generate_synthetic_corpus
from tan2d.temporal_map import candidate_mask

manifest = generate_synthetic_corpus(tempfile.mkdtemp(), seed=1, spec=CorpusSpec(n_videos=200))
features = manifest.load_features()
gts = [(a.start_sec, a.end_sec, features[a.video_id].duration) for a in manifest.annotations]

ms = (0.5, 0.7, 0.9)
print("N     " + "  ".join(f"IoU>{m}" for m in ms))
for n in (8, 16, 32, 64):
    ub = upper_bound(gts, candidate_mask(n), ms)
    print(f"{n:<5d} " + "  ".join(f"{ub[m]:7.1f}" for m in ms))
