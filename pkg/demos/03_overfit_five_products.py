"""Memorize a 5-product corpus and read the questions back out.

Classic seq2seq sanity check: train perplexity should crash below 1.1 and
greedy decoding should reproduce every gold question verbatim.
"""

import math

from pqgen import corpus as C
from pqgen import decoding as D
from pqgen import model as M
from pqgen import training as TR

records = C.synth_corpus(0, 5, questions_range=(1, 1))
vocab = C.build_vocab(records)
split = C.SplitCorpus(train=tuple(records), validation=tuple(records),
                      test=())

cfg = M.ModelConfig(vocab_size=len(vocab), d_model=32, n_heads=2,
                    n_enc_layers=1, n_dec_layers=1, d_ff=64, max_len=64)
# batch 5 covers all 5 pairs each step, so exp(objective) is the train
# perplexity.
tc = TR.TrainConfig(lambda_div=0.0, learning_rate=3e-3, batch_size=5,
                    epochs=120, seed=0)
result = TR.train(split, vocab, cfg, tc, mode="traditional")

steps = [r for r in result.log_rows if r["kind"] == "step"]
for r in steps:
    if r["step"] % 20 == 0 or r["step"] == 1:
        print(f"step {r['step']:4d}  train ppl {math.exp(r['objective']):8.4f}")
first = next(r["step"] for r in steps if math.exp(r["objective"]) < 1.1)
print(f"perplexity dropped below 1.1 at step {first}")

print()
for rec in records:
    ids = D.greedy_decode(result.params, vocab.encode_text(rec.context),
                          max_new_tokens=20)
    text = C.detokenize(vocab.decode(ids))
    mark = "==" if text == rec.questions[0] else "!="
    print(f"{rec.product_id}: {text!r} {mark} gold")
