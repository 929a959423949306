"""Recompute recall, precision, F1 and accuracy from the published confusion matrices.

Prints each task's text report, the reported values next to the recomputed
weighted ones, and the fold-average row for the binary task.

    python demos/published_metrics.py
"""

from cvrnet.metrics import METRICS, emit_report, evaluate_confusion, fold_average
from cvrnet.reference import FIXTURES, TASK1_FOLD_ACCURACY

for task, fx in FIXTURES.items():
    report = evaluate_confusion(fx.confusion())
    print(f"== {task} ({report.confusion.total} images) ==")
    print(emit_report(report, "text"))
    for key in METRICS:
        got, want = report.weighted[key], fx.reported[key]
        print(f"{key:<10} recomputed {got:.4f}  reported {want:.3f}  diff {got - want:+.4f}")
    print()

rows = [dict.fromkeys(METRICS, a) for a in TASK1_FOLD_ACCURACY]
print("task1 fold accuracies", TASK1_FOLD_ACCURACY)
print(fold_average(rows).table_row("Average"))
