"""Published confusion matrices (summed over folds) and their reported metric averages.

Rows are predicted classes, columns actual classes.
"""

from __future__ import annotations

from dataclasses import dataclass

from .metrics import ConfusionMatrix


@dataclass(frozen=True)
class Fixture:
    task: str
    class_names: tuple[str, ...]
    counts: tuple[tuple[int, ...], ...]
    # recall, precision, f1, accuracy as printed in the results table
    reported: dict

    def confusion(self) -> ConfusionMatrix:
        return ConfusionMatrix([list(r) for r in self.counts], list(self.class_names))


def _rep(recall, precision, f1, accuracy):
    return {"recall": recall, "precision": precision, "f1": f1, "accuracy": accuracy}


FIXTURES = {
    "task1": Fixture("task1", ("NOR", "NCP"),
                     ((5848, 7), (8, 493)),
                     _rep(0.997, 0.997, 0.997, 0.998)),
    "task2": Fixture("task2", ("NOR", "CPN", "NCP"),
                     ((1461, 80, 6), (119, 4185, 15), (3, 8, 479)),
                     _rep(0.964, 0.963, 0.963, 0.964)),
    "task3": Fixture("task3", ("NOR", "CPB", "CPV", "NCP"),
                     ((1498, 76, 74, 13), (31, 2369, 529, 14), (52, 330, 885, 13), (2, 5, 5, 460)),
                     _rep(0.820, 0.816, 0.816, 0.820)),
    "task4": Fixture("task4", ("NOR", "CPN", "NCP"),
                     ((1522, 88, 7), (126, 4276, 26), (0, 7, 467)),
                     _rep(0.961, 0.961, 0.961, 0.961)),
    "task5": Fixture("task5", ("NOR", "NCP"),
                     ((87, 26), (18, 72)),
                     _rep(0.780, 0.780, 0.780, 0.780)),
}

# Per-fold accuracies printed for the binary task, used to check fold averaging.
TASK1_FOLD_ACCURACY = (0.998, 0.998, 0.996, 0.998, 0.998)
