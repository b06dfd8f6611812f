"""Seed-matched comparison: pair-regularized training vs plain training.

One seed of the experiment behind the acceptance suite's diversity
criteria, at the same scale. Takes about a minute.
"""

import numpy as np

from pqgen import corpus as C
from pqgen import decoding as D
from pqgen import metrics as MX
from pqgen import model as M
from pqgen import training as TR

records = C.synth_corpus(seed=0, n_products=500)
split = C.split(records, seed=0)
vocab = C.build_vocab(split.train)
cfg = M.ModelConfig(vocab_size=len(vocab), d_model=32, n_heads=2,
                    n_enc_layers=1, n_dec_layers=1, d_ff=64, max_len=64)
gen_cfg = D.GenerationConfig()


def run(mode, lam):
    print(f"training {mode} (lambda={lam}) on {len(split.train)} products...")
    tc = TR.TrainConfig(lambda_div=lam, learning_rate=1e-3, batch_size=8,
                        epochs=6, seed=0)
    result = TR.train(split, vocab, cfg, tc, mode=mode)
    top1, bleus = [], []
    for rec in split.test:
        ids = vocab.encode_text(rec.context)[:cfg.max_len]
        out = D.generate_questions(result.params, vocab, ids, gen_cfg)
        top1.append(C.tokenize(out.questions[0]))
        bleus.append(MX.bleu(top1[-1], [C.tokenize(q) for q in rec.questions]))
    return result.params, top1, float(np.mean(bleus))


reg_params, reg_top, reg_bleu = run("ltd", 0.1)
plain_params, plain_top, plain_bleu = run("traditional", 0.0)

reg_d3 = MX.distinct_n(reg_top, 3)
plain_d3 = MX.distinct_n(plain_top, 3)
print(f"\ntest top-1 questions over {len(split.test)} products")
print(f"  unique questions: regularized {len(set(map(tuple, reg_top)))}, "
      f"plain {len(set(map(tuple, plain_top)))}")
print(f"  Dist-3: regularized {reg_d3:.4f}, plain {plain_d3:.4f} "
      f"({(reg_d3 - plain_d3) / plain_d3:+.1%})")
print(f"  BLEU:   regularized {reg_bleu:.1f}, plain {plain_bleu:.1f} "
      f"({(reg_bleu - plain_bleu) / plain_bleu:+.1%})")

# One common embedder (the plain checkpoint) so the curves are comparable.
thresholds = [round(0.1 * k, 1) for k in range(1, 7)]
print("  clusters per dissimilarity threshold (common embedder):")
for label, top in (("regularized", reg_top), ("plain", plain_top)):
    emb = MX.embed_questions(plain_params, [vocab.encode(t) for t in top])
    counts = [c for _, c in MX.cluster_count_sweep(emb, thresholds)]
    print(f"    {label:11s} {counts}")
