"""Synthetic paired text/image embeddings with planted, known bias.

Every embedding is ``normalize(concept + sum_axis magnitude * dir + noise)``
where ``dir`` depends on modality, axis and attribute value. Image bias
directions come from an orthonormal basis. Text bias directions are the image
ones rotated by ``angle_deg`` towards an orthogonal complement vector. Binary
axes use one antipodal direction pair (``+u`` / ``-u``) unless
``binary_antipodal`` is off; other axes get one direction per value.

Outputs:

``train``
    One text prompt per (concept, attribute combination), plus
    ``samples_per_concept`` images per concept cycling through the combinations.
``gallery``
    Held-out images drawn the same way (``gallery_per_concept`` per concept).
``attribute_prompts``
    Concept-free prompts ("a photo of a male person"), one per attribute
    combination, linked as counterfactual pairs on the first axis.
``queries``
    One attribute-free prompt per concept. It leans towards a stereotyped value
    on every axis with weight ``magnitude * stereotype``. This is what makes
    undebiased retrieval skewed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from itertools import product

import numpy as np

from .embed_store import LabeledEmbeddingSet, SampleLabel, normalize_rows
from .errors import ConfigError

DEFAULT_AXES = {"gender": ("male", "female")}
UNIVERSAL_AXES = {
    "gender": ("male", "female"),
    "age": ("young", "middle-aged", "old"),
    "race": ("white", "black", "asian"),
}


@dataclass(frozen=True)
class SynthConfig:
    dim: int = 64
    concepts: int = 20
    samples_per_concept: int = 100
    gallery_per_concept: int = 200
    axes: dict = field(default_factory=lambda: dict(DEFAULT_AXES))
    angle_deg: float = 45.0
    magnitude: float = 1.0
    noise: float = 0.05
    stereotype: float = 0.5
    aligned: bool = False
    binary_antipodal: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "axes", {k: tuple(v) for k, v in dict(self.axes).items()})
        if self.dim < 2 or self.concepts < 1:
            raise ConfigError("dim must be >= 2 and concepts >= 1")
        if self.samples_per_concept < 1 or self.gallery_per_concept < 1:
            raise ConfigError("sample counts must be positive")
        if not self.axes or any(len(v) < 2 for v in self.axes.values()):
            raise ConfigError("every axis needs at least two values")
        if any(len(set(v)) != len(v) for v in self.axes.values()):
            raise ConfigError("axis values must be distinct")
        if not 0.0 <= self.angle_deg <= 90.0:
            raise ConfigError(f"cross-modal angle must lie in [0, 90], got {self.angle_deg}")
        if self.magnitude < 0 or self.noise < 0 or self.stereotype < 0:
            raise ConfigError("magnitude, noise and stereotype must be non-negative")
        total_values = sum(len(v) for v in self.axes.values())
        if self.dim <= self.concepts + total_values:
            raise ConfigError(
                f"dim {self.dim} leaves no room for {self.concepts} concepts and "
                f"{total_values} attribute values"
            )
        needed = self.concepts + 2 * self.n_directions + 1
        if self.dim < needed:
            raise ConfigError(f"dim {self.dim} < {needed} basis vectors required")

    @property
    def n_directions(self) -> int:
        return sum(1 if self._antipodal(v) else len(v) for v in self.axes.values())

    def _antipodal(self, values) -> bool:
        return self.binary_antipodal and len(values) == 2

    def to_json(self) -> dict:
        out = asdict(self)
        out["axes"] = {k: list(v) for k, v in self.axes.items()}
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "SynthConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class GroundTruth:
    concept_vectors: np.ndarray
    image_dirs: dict[str, dict[str, np.ndarray]]
    text_dirs: dict[str, dict[str, np.ndarray]]
    stereotypes: dict[str, dict[str, str]]
    planted_dims: dict[str, list[int]]
    magnitude: float
    angle_deg: float

    def bias_direction(self, modality: str, axis: str, value: str) -> np.ndarray:
        table = self.text_dirs if modality == "text" else self.image_dirs
        return table[axis][value]

    def contrast(self, modality: str, axis: str) -> np.ndarray:
        """Unit vector along the first-minus-second value contrast of ``axis`` (config order)."""
        values = list(self.image_dirs[axis])
        v = self.bias_direction(modality, axis, values[0]) - self.bias_direction(modality, axis, values[1])
        return v / np.linalg.norm(v)

    def to_json(self) -> dict:
        def dirs(table):
            return {a: {v: vec.tolist() for v, vec in vals.items()} for a, vals in table.items()}

        return {
            "magnitude": self.magnitude,
            "angle_deg": self.angle_deg,
            "concept_vectors": self.concept_vectors.tolist(),
            "image_dirs": dirs(self.image_dirs),
            "text_dirs": dirs(self.text_dirs),
            "stereotypes": self.stereotypes,
            "planted_dims": self.planted_dims,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GroundTruth":
        def dirs(table):
            return {a: {v: np.asarray(vec) for v, vec in vals.items()} for a, vals in table.items()}

        return cls(
            concept_vectors=np.asarray(obj["concept_vectors"]),
            image_dirs=dirs(obj["image_dirs"]),
            text_dirs=dirs(obj["text_dirs"]),
            stereotypes=obj["stereotypes"],
            planted_dims={k: list(v) for k, v in obj["planted_dims"].items()},
            magnitude=obj["magnitude"],
            angle_deg=obj["angle_deg"],
        )


@dataclass
class SynthData:
    train: LabeledEmbeddingSet
    gallery: LabeledEmbeddingSet
    queries: LabeledEmbeddingSet
    attribute_prompts: LabeledEmbeddingSet
    truth: GroundTruth
    config: SynthConfig

    @property
    def text_set(self) -> LabeledEmbeddingSet:
        return self.train.select(self.train.modality_mask("text"))

    @property
    def image_set(self) -> LabeledEmbeddingSet:
        return self.train.select(self.train.modality_mask("image"))


def concept_name(c: int) -> str:
    return f"concept{c:02d}"


def _combo_slug(combo: dict) -> str:
    return "-".join(combo.values())


def generate(cfg: SynthConfig) -> SynthData:
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    d = cfg.dim
    if cfg.aligned:
        basis = np.eye(d)[:, rng.permutation(d)]
    else:
        q, r = np.linalg.qr(rng.standard_normal((d, d)))
        basis = q * np.sign(np.diag(r))
    columns = iter(basis.T)
    concepts = np.stack([next(columns) for _ in range(cfg.concepts)])

    theta = np.deg2rad(cfg.angle_deg)
    image_dirs: dict[str, dict[str, np.ndarray]] = {}
    text_dirs: dict[str, dict[str, np.ndarray]] = {}
    planted: dict[str, list[int]] = {}
    complements = []
    for axis, values in cfg.axes.items():
        if cfg._antipodal(values):
            u = next(columns)
            image_dirs[axis] = {values[0]: u, values[1]: -u}
            base = [u]
        else:
            base = [next(columns) for _ in values]
            image_dirs[axis] = dict(zip(values, base))
        planted[axis] = [int(np.argmax(np.abs(b))) for b in base] if cfg.aligned else []
        complements.append((axis, values, base))
    text_dirs = {}
    for axis, values, base in complements:
        rotated = [np.cos(theta) * b + np.sin(theta) * next(columns) for b in base]
        if cfg._antipodal(values):
            text_dirs[axis] = {values[0]: rotated[0], values[1]: -rotated[0]}
        else:
            text_dirs[axis] = dict(zip(values, rotated))

    axes = list(cfg.axes)
    combos = [dict(zip(axes, vals)) for vals in product(*(cfg.axes[a] for a in axes))]
    stereotypes = {}
    for axis in axes:
        values = cfg.axes[axis]
        tiled = np.resize(np.arange(len(values)), cfg.concepts)
        order = rng.permutation(tiled)
        for c in range(cfg.concepts):
            stereotypes.setdefault(concept_name(c), {})[axis] = values[int(order[c])]

    def bias(modality, combo, scale=1.0):
        table = text_dirs if modality == "text" else image_dirs
        return cfg.magnitude * scale * sum(table[a][combo[a]] for a in axes)

    text_noise = cfg.noise * rng.standard_normal((cfg.concepts, d))

    # text prompts: shared per-concept noise, so counterfactual prompts differ only in bias
    t_labels, t_rows = [], []
    for c in range(cfg.concepts):
        name = concept_name(c)
        for combo in combos:
            first = axes[0]
            values = cfg.axes[first]
            swapped = dict(combo, **{first: values[(values.index(combo[first]) + 1) % len(values)]})
            t_labels.append(SampleLabel(
                id=f"t-{name}-{_combo_slug(combo)}",
                modality="text",
                concept=name,
                attributes=combo,
                counterfactual_of=f"t-{name}-{_combo_slug(swapped)}",
                prompt_text=f"a photo of a {' '.join(combo.values())} {name}",
            ))
            t_rows.append(concepts[c] + bias("text", combo) + text_noise[c])

    def images(prefix, per_concept, stream):
        irng = np.random.default_rng([cfg.seed, stream])
        labels, rows = [], []
        for c in range(cfg.concepts):
            name = concept_name(c)
            for j in range(per_concept):
                combo = combos[j % len(combos)]
                labels.append(SampleLabel(
                    id=f"{prefix}-{name}-{j:04d}",
                    modality="image",
                    concept=name,
                    attributes=combo,
                ))
                rows.append(concepts[c] + bias("image", combo) + cfg.noise * irng.standard_normal(d))
        return labels, rows

    i_labels, i_rows = images("v", cfg.samples_per_concept, 1)
    g_labels, g_rows = images("g", cfg.gallery_per_concept, 2)

    q_labels, q_rows = [], []
    for c in range(cfg.concepts):
        name = concept_name(c)
        q_labels.append(SampleLabel(id=f"q-{name}", modality="text", concept=name,
                                    prompt_text=f"a photo of a {name}"))
        q_rows.append(concepts[c] + bias("text", stereotypes[name], cfg.stereotype) + text_noise[c])

    vocab = {a: list(v) for a, v in cfg.axes.items()}

    # drawn after every other basis vector so adding it left the rest unchanged
    person = next(columns)
    person_noise = cfg.noise * rng.standard_normal(d)
    a_labels, a_rows = [], []
    for combo in combos:
        first = axes[0]
        values = cfg.axes[first]
        swapped = dict(combo, **{first: values[(values.index(combo[first]) + 1) % len(values)]})
        a_labels.append(SampleLabel(
            id=f"a-person-{_combo_slug(combo)}",
            modality="text",
            concept="person",
            attributes=combo,
            counterfactual_of=f"a-person-{_combo_slug(swapped)}",
            prompt_text=f"a photo of a {' '.join(combo.values())} person",
        ))
        a_rows.append(person + bias("text", combo) + person_noise)

    def make(labels, rows):
        return LabeledEmbeddingSet(labels=tuple(labels), matrix=normalize_rows(np.stack(rows)),
                                   attribute_vocab=vocab)

    truth = GroundTruth(
        concept_vectors=concepts,
        image_dirs=image_dirs,
        text_dirs=text_dirs,
        stereotypes=stereotypes,
        planted_dims=planted,
        magnitude=cfg.magnitude,
        angle_deg=cfg.angle_deg,
    )
    return SynthData(
        train=make(t_labels + i_labels, t_rows + i_rows),
        gallery=make(g_labels, g_rows),
        queries=make(q_labels, q_rows),
        attribute_prompts=make(a_labels, a_rows),
        truth=truth,
        config=cfg,
    )


def save_truth(truth: GroundTruth, path) -> None:
    # insertion order is kept: contrast() depends on the order of axis values
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(truth.to_json(), fh)
        fh.write("\n")


def load_truth(path) -> GroundTruth:
    with open(path, encoding="utf-8") as fh:
        return GroundTruth.from_json(json.load(fh))
