"""Sweep the diversity penalty and watch the beam groups spread apart.

Trains one small model, then decodes the same product with the group
penalty turned progressively up. At 0.0 every group returns the same
beam-search result; large penalties force each group onto fresh tokens.
"""

import dataclasses

from pqgen import corpus as C
from pqgen import decoding as D
from pqgen import model as M
from pqgen import training as TR

records = C.synth_corpus(seed=0, n_products=60)
split = C.split(records, seed=0)
vocab = C.build_vocab(split.train)

cfg = M.ModelConfig(vocab_size=len(vocab), d_model=32, n_heads=2,
                    n_enc_layers=1, n_dec_layers=1, d_ff=64, max_len=64)
tc = TR.TrainConfig(lambda_div=0.0, learning_rate=1e-3, batch_size=8,
                    epochs=4, seed=0)
print("training a small model on 60 products (takes a few seconds)...")
result = TR.train(split, vocab, cfg, tc, mode="traditional")

product = split.test[0]
print(f"\ncontext: {product.context!r}\n")
ctx = vocab.encode_text(product.context)[:cfg.max_len]

base = D.GenerationConfig(num_groups=3, beams_per_group=2,
                          diversity_penalty=0.0, length_penalty=1.0,
                          no_repeat_ngram=2, max_new_tokens=16,
                          questions_per_product=6)
for penalty in (0.0, 1.0, 5.0, 20.0):
    gc = dataclasses.replace(base, diversity_penalty=penalty)
    groups = D.diverse_beam_search(result.params, ctx, gc)
    print(f"penalty {penalty:5.1f}:")
    for g, cands in enumerate(groups):
        best = cands[0]
        toks = vocab.decode(best.token_ids[:-1] if best.finished
                            else best.token_ids)
        print(f"  group {g}: {C.detokenize(toks)!r}  "
              f"(logprob {best.cum_logprob:.2f})")

gc = dataclasses.replace(base, diversity_penalty=5.0)
out = D.generate_questions(result.params, vocab, ctx, gc)
print(f"\npooled and deduplicated top questions "
      f"(shortage={out.shortage}):")
for q, s in zip(out.questions, out.scores):
    print(f"  {s:7.3f}  {q!r}")
