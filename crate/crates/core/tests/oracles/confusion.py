"""Macro/micro F1 for a fixed confusion matrix, from precision and recall."""
from fractions import Fraction

cm = [[2, 1, 0], [0, 1, 1], [0, 0, 3]]  # rows = truth, cols = prediction
k = len(cm)
f1s = []
for c in range(k):
    tp = cm[c][c]
    pred = sum(cm[r][c] for r in range(k))
    true = sum(cm[c])
    p = Fraction(tp, pred)
    r = Fraction(tp, true)
    f1s.append(2 * p * r / (p + r))
macro = sum(f1s) / k
tp = sum(cm[c][c] for c in range(k))
total = sum(map(sum, cm))
micro_p = Fraction(tp, total)
micro_r = Fraction(tp, total)
micro = 2 * micro_p * micro_r / (micro_p + micro_r)
print("per-class", [str(f) for f in f1s])
print("macro", macro, float(macro))
print("micro", micro, float(micro))
