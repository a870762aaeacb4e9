"""Recompute F1 from reported precision/recall pairs and compare with the reported F1.

A large gap means the reported F1 was taken at a different operating point
than the precision/recall pair.
"""

from udeep.evaluation import f1_from_pr

# model: (precision, recall, reported F1, mean inference current mA)
REPORTED = {
    "yolov5s": (0.885, 0.92, 0.87, 3158),
    "yolov5n": (0.851, 0.93, 0.84, 3277),
    "yolov8s": (0.917, 0.92, 0.85, 2548),
    "yolov8n": (0.83, 0.92, 0.87, 2710),
}


def main() -> None:
    print(f"{'model':8} {'P':>6} {'R':>6} {'F1 rep':>7} {'F1 calc':>8} {'gap':>7}")
    for name, (p, r, f1_rep, _) in REPORTED.items():
        f1 = f1_from_pr(p, r)
        print(f"{name:8} {p:6.3f} {r:6.3f} {f1_rep:7.2f} {f1:8.4f} {f1 - f1_rep:+7.4f}")


if __name__ == "__main__":
    main()
