"""Tour the relevance and diversity metrics on hand-sized examples.

Every number here is small enough to verify on paper.
"""

import numpy as np

from pqgen import metrics as MX

hyp = "what are the dimensions of this item ?".split()
ref = "what are the dimensions of the table ?".split()
print("BLEU")
print(f"  identical: {MX.bleu(hyp, [hyp]):.2f}")
print(f"  near miss: {MX.bleu(hyp, [ref]):.2f}")
print(f"  brevity:   {MX.bleu(list('abcd'), [list('abcde')]):.2f} "
      "(all n-grams match, hypothesis one token short)")

print("METEOR (exact-match variant)")
print(f"  identical 4-gram: {MX.meteor_lite(list('abcd'), list('abcd')):.2f}")
print(f"  single match:     {MX.meteor_lite(['a'], ['a']):.2f} "
      "(one chunk of one match carries the full fragmentation penalty)")
print(f"  reordered:        {MX.meteor_lite(list('ab'), list('ba')):.2f} "
      "(same tokens, two chunks)")

print("Distinct-N over a pool of generations")
pool = [
    "does it need batteries ?".split(),
    "does it need assembly ?".split(),
    "does it need batteries ?".split(),
]
for n in (1, 2, 3):
    print(f"  Dist-{n}: {MX.distinct_n(pool, n):.4f}")

print("Pairwise-BLEU (lower = locally more diverse)")
same = [["a", "b", "c"]] * 3
mixed = [["a", "b", "c"], ["d", "e", "f"], ["g", "h", "i"]]
print(f"  three identical questions: {MX.pairwise_bleu(same):.2f}")
print(f"  three disjoint questions:  {MX.pairwise_bleu(mixed):.2f}")

print("e-Div (geometric mean of per-dimension spread)")
tight = np.array([[1.0, 1.0], [1.1, 0.9], [0.9, 1.1]])
wide = np.array([[0.0, 0.0], [2.0, 2.0], [4.0, 8.0]])
print(f"  tight cloud: {MX.e_div(tight):.4f}")
print(f"  wide cloud:  {MX.e_div(wide):.4f}")

print("Cluster counts over rising dissimilarity thresholds")
rows = np.array([[1.0, 0.0], [0.999, 0.01], [0.0, 1.0], [0.01, 0.999],
                 [0.7, 0.7]])
for threshold, count in MX.cluster_count_sweep(rows, [0.05, 0.3, 0.6, 1.0]):
    print(f"  threshold {threshold:.2f}: {count} clusters")
