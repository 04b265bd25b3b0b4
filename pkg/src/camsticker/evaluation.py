"""Datasets, fooling-rate reports and the dot-count sweep."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .artifacts import read_image, read_structured, write_image
from .perturb import apply_pattern_batch

log = logging.getLogger(__name__)

SPLITS = ("train-attack", "test")
SHAPE_CLASSES = ("disk", "square", "triangle")


@dataclass(frozen=True)
class DatasetItem:
    label: int
    split: str
    path: str | None = None
    image: np.ndarray | None = field(default=None, repr=False, compare=False)

    def load(self) -> np.ndarray:
        if self.image is not None:
            return self.image
        if self.path is None:
            raise ValueError("dataset item has neither an image nor a path")
        return read_image(self.path)


@dataclass(frozen=True)
class LabeledDataset:
    items: tuple[DatasetItem, ...]
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        for it in self.items:
            if it.split not in SPLITS:
                raise ValueError(f"unknown split {it.split!r}; expected one of {SPLITS}")
            if it.label < 0 or (self.class_names is not None and it.label >= len(self.class_names)):
                raise ValueError(f"class index {it.label} out of range")

    def __len__(self):
        return len(self.items)

    def split(self, name) -> "LabeledDataset":
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return LabeledDataset(tuple(it for it in self.items if it.split == name), self.class_names)

    def of_class(self, label) -> "LabeledDataset":
        return LabeledDataset(tuple(it for it in self.items if it.label == label), self.class_names)

    def images(self) -> np.ndarray:
        if not self.items:
            return np.zeros((0, 0, 0, 3))
        return np.stack([it.load() for it in self.items])

    def labels(self) -> np.ndarray:
        return np.array([it.label for it in self.items], dtype=int)

    # manifest --------------------------------------------------------------

    def write(self, directory) -> Path:
        """Write PNGs plus ``manifest.json`` (paths relative to the manifest)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        rows = []
        for n, it in enumerate(self.items):
            rel = f"images/{n:05d}_c{it.label}_{it.split}.png"
            write_image(directory / rel, it.load())
            rows.append({"path": rel, "class": it.label, "split": it.split})
        manifest = {"classes": list(self.class_names) if self.class_names else None, "items": rows}
        from .artifacts import canonical_json

        out = directory / "manifest.json"
        out.write_text(canonical_json(manifest))
        return out

    @classmethod
    def from_manifest(cls, path) -> "LabeledDataset":
        path = Path(path)
        doc = read_structured(path)
        base = path.parent
        items = []
        for row in doc["items"]:
            p = Path(row["path"])
            if not p.is_absolute():
                p = base / p
            if not p.is_file():
                raise FileNotFoundError(f"dataset image not found: {p}")
            items.append(DatasetItem(int(row["class"]), row.get("split", "test"), str(p)))
        classes = doc.get("classes")
        return cls(tuple(items), tuple(classes) if classes else None)


# --------------------------------------------------------------------------
# synthetic shapes


def _hsv_to_rgb(h, s, v):
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def _shape_mask(kind, size, ci, cj, scale, ss=3):
    # supersampled coverage in [0, 1]; squares axis-aligned, triangles apex-up
    t = (np.arange(size * ss) + 0.5) / ss - 0.5
    ii, jj = np.meshgrid(t, t, indexing="ij")
    y, x = ii - ci, jj - cj
    if kind == 0:
        inside = x * x + y * y <= scale * scale
    elif kind == 1:
        half = scale * 0.85
        inside = (np.abs(x) <= half) & (np.abs(y) <= half)
    else:
        circum = scale * 1.25
        inside = np.ones_like(x, dtype=bool)
        for k in range(3):
            a = -np.pi / 2 + k * 2 * np.pi / 3
            # the edge facing away from vertex k sits at the inradius, circum / 2
            inside &= -(x * np.cos(a) + y * np.sin(a)) <= circum / 2
    return inside.reshape(size, ss, size, ss).mean(axis=(1, 3))


def render_shape(rng, kind, size=64):
    bg_level = rng.uniform(0.25, 0.75)
    bg_tint = rng.uniform(-0.08, 0.08, 3)
    img = np.clip(bg_level + bg_tint + rng.normal(0, 0.04, (size, size, 3)), 0, 1)
    scale = rng.uniform(0.16, 0.26) * size
    margin = scale * 1.3
    ci, cj = rng.uniform(margin, size - margin, 2)
    hue = rng.uniform()
    value = 0.95 if bg_level < 0.5 else 0.2 + rng.uniform(0, 0.15)
    color = np.array(_hsv_to_rgb(hue, rng.uniform(0.6, 1.0), value))
    m = _shape_mask(kind, size, ci, cj, scale)[..., None]
    img = (1 - m) * img + m * color
    return np.rint(np.clip(img, 0, 1) * 255) / 255


def synth_shapes_dataset(seed=0, n_per_class=100, size=64, test_fraction=0.3) -> LabeledDataset:
    """Disks, squares and triangles with random position, scale, hue and background noise.

    The first ``1 - test_fraction`` of each class is tagged train-attack, the rest test.
    Pixels are quantized to 8 bits so a written manifest reloads exactly.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    items = []
    n_test = int(round(n_per_class * test_fraction))
    for label in range(len(SHAPE_CLASSES)):
        rng = np.random.default_rng([seed, label])
        for n in range(n_per_class):
            split = "test" if n >= n_per_class - n_test else "train-attack"
            items.append(DatasetItem(label, split, None, render_shape(rng, label, size)))
    return LabeledDataset(tuple(items), SHAPE_CLASSES)


# --------------------------------------------------------------------------
# fooling reports


@dataclass
class FoolingReport:
    n_images: int
    fraction_correct: float
    fraction_target: float
    fraction_other: float
    predictions: list[int | None]
    n_failed: int = 0

    def to_dict(self):
        return {
            "n_images": self.n_images,
            "n_failed": self.n_failed,
            "fraction_correct": self.fraction_correct,
            "fraction_target": self.fraction_target,
            "fraction_other": self.fraction_other,
            "predictions": self.predictions,
        }

    def table(self, class_name="victim", target_name="target", attacked=True) -> str:
        """Plain-text row in the Correct / Target / Other layout."""
        head = f"{'Class':<24}{'Attack':<8}{'Correct':>9}{'Target':>9}{'Other':>9}"
        row = (
            f"{class_name + ' -> ' + target_name:<24}{'Yes' if attacked else 'No':<8}"
            f"{100 * self.fraction_correct:>8.1f}%{100 * self.fraction_target:>8.1f}%{100 * self.fraction_other:>8.1f}%"
        )
        return head + "\n" + row + "\n"


def evaluate_fooling(pattern, dataset, y_star, y_targ, classifier, threads=1, batch_size=64) -> FoolingReport:
    """Classify every perturbed item and bucket predictions into correct/target/other."""
    items = list(dataset.items if isinstance(dataset, LabeledDataset) else dataset)
    wrong = [n for n, it in enumerate(items) if it.label != y_star]
    if wrong:
        raise ValueError(f"{len(wrong)} dataset items are not of victim class {y_star} (first: #{wrong[0]})")
    preds: list[int | None] = [None] * len(items)

    def run(chunk):
        idx = list(range(chunk, min(chunk + batch_size, len(items))))
        out = {}
        try:
            x = apply_pattern_batch(np.stack([items[n].load() for n in idx]), pattern)
            for n, p in zip(idx, classifier.predict(x)):
                out[n] = int(p)
            return out
        except Exception as exc:
            log.debug("batch at %d failed (%s); retrying per item", chunk, exc)
        for n in idx:
            try:
                x = apply_pattern_batch(items[n].load()[None], pattern)
                out[n] = int(classifier.predict(x)[0])
            except Exception as exc:
                log.warning("item %d failed: %s", n, exc)
                out[n] = None
        return out

    starts = range(0, len(items), batch_size)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    for part in parts:
        for n, p in part.items():
            preds[n] = p
    ok = [p for p in preds if p is not None]
    failed = len(preds) - len(ok)
    if failed:
        log.warning("%d of %d items failed classification and are excluded", failed, len(preds))
    m = len(ok)
    if m == 0:
        return FoolingReport(len(items), 0.0, 0.0, 0.0, preds, failed)
    c = sum(p == y_star for p in ok)
    t = sum(p == y_targ for p in ok)
    return FoolingReport(len(items), c / m, t / m, (m - c - t) / m, preds, failed)


@dataclass
class SweepRow:
    num_dots: int
    targeted_rate: float | None
    report: FoolingReport | None = None
    loss: float | None = None
    error: str | None = None


def dot_count_sweep(
    config, counts, classifier, dataset: LabeledDataset, fine_tune=True, attack_images=None
) -> list[SweepRow]:
    """One attack + held-out evaluation per dot count; failed rows are kept and marked.

    ``attack_images`` caps the attack set at the first n victim train-attack items.
    """
    from .attack import run_attack

    counts = list(counts)
    if not counts:
        raise ValueError("dot_count_sweep needs at least one dot count")
    for k in counts:
        if not 1 <= k <= config.threat_model.max_dots:
            raise ValueError(f"dot count {k} outside [1, {config.threat_model.max_dots}]")
    victim = dataset.of_class(config.victim)
    attack_set = victim.split("train-attack")
    if attack_images is not None:
        attack_set = LabeledDataset(attack_set.items[:attack_images], attack_set.class_names)
    if not len(attack_set):
        raise ValueError(f"no train-attack images of class {config.victim}")
    attack_imgs = attack_set.images()
    test_set = victim.split("test")
    rows = []
    for k in counts:
        try:
            result = run_attack(config.with_dots(k), classifier, attack_imgs, fine_tune=fine_tune)
            rep = evaluate_fooling(result.pattern, test_set, config.victim, config.target, classifier)
            rows.append(SweepRow(k, rep.fraction_target, rep, result.final_loss))
        except Exception as exc:  # keep sweeping
            log.error("sweep row K=%d failed: %s", k, exc)
            rows.append(SweepRow(k, None, None, None, str(exc)))
    return rows


def sweep_table(rows) -> str:
    lines = [f"{'Number of Dots':>14}  {'Targeted Fooling Rate':>22}"]
    for r in rows:
        val = "failed" if r.targeted_rate is None else f"{100 * r.targeted_rate:.1f}%"
        lines.append(f"{r.num_dots:>14}  {val:>22}")
    return "\n".join(lines) + "\n"
