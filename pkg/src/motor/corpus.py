"""Deterministic synthetic corpus: procedurally rendered 64x64 grayscale
"chest" images paired with templated reports, 14-dim binary labels, a
consistent triplet store, and an entity lexicon.

The images are procedural glyph renderings, not samples from any clinical
distribution; they exist solely so the training and evaluation claims of
this package can be exercised at desk scale. Do not use them, or models
trained on them, for anything medical.

Knowledge relevance is built in: pairs of findings co-occur by generator
rule, and those rules are recorded ONLY in the triplet store (as
"suggestive of" entries), never in the report templates. A model that
reads the triplet store therefore has signal that the text alone lacks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tokenizer import normalize_words
from .triplets import EntityLexicon, Triplet, TripletStore

IMAGE_SIZE = 64

ORGANS = ("lung", "heart", "pleural", "airspace", "bone", "mediastinum", "diaphragm")
ALWAYS_PRESENT = ("lung", "heart", "bone")

# ChestX-ray14 label order; the defaults used by the label-alignment
# objective and the diagnosis classifier heads.
LABEL_NAMES = (
    "atelectasis", "cardiomegaly", "effusion", "infiltration", "mass",
    "nodule", "pneumonia", "pneumothorax", "consolidation", "edema",
    "emphysema", "fibrosis", "pleural thickening", "hernia",
)

FINDING_PARENT = {
    "atelectasis": "lung", "cardiomegaly": "heart", "effusion": "pleural",
    "infiltration": "lung", "mass": "lung", "nodule": "lung",
    "pneumonia": "lung", "pneumothorax": "pleural", "consolidation": "airspace",
    "edema": "lung", "emphysema": "lung", "fibrosis": "lung",
    "thickening": "pleural", "hernia": "diaphragm", "opacity": "lung",
    "fracture": "bone", "scoliosis": "bone", "calcification": "mediastinum",
    "widening": "mediastinum", "elevation": "diaphragm",
}
FINDINGS = tuple(FINDING_PARENT)

FINDING_TO_LABEL = {
    "atelectasis": 0, "cardiomegaly": 1, "effusion": 2, "infiltration": 3,
    "mass": 4, "nodule": 5, "pneumonia": 6, "pneumothorax": 7,
    "consolidation": 8, "edema": 9, "emphysema": 10, "fibrosis": 11,
    "thickening": 12, "hernia": 13,
}

# Generator co-occurrence rules; mirrored into the triplet store as
# "suggestive of" triplets and nowhere else.
RELATED = {
    "pneumonia": "effusion",
    "consolidation": "pneumothorax",
    "edema": "cardiomegaly",
    "mass": "nodule",
    "fibrosis": "scoliosis",
    "emphysema": "fracture",
}
RELATED_PROB = 0.65

FINDING_TEMPLATES = {
    "atelectasis": (
        "there is streaky atelectasis at the lung base.",
        "bandlike atelectasis is present in the lung.",
        "minor atelectasis is noted.",
        "the lung demonstrates subsegmental atelectasis.",
    ),
    "cardiomegaly": (
        "the heart is enlarged consistent with cardiomegaly.",
        "cardiomegaly is present.",
        "stable cardiomegaly is again seen.",
        "moderate cardiomegaly persists.",
    ),
    "effusion": (
        "there is a small effusion layering at the pleural base.",
        "a left effusion is seen along the pleural margin.",
        "small effusion is present.",
        "the pleural space contains an effusion.",
    ),
    "infiltration": (
        "patchy infiltration is seen in the lung.",
        "there is infiltration of the lung parenchyma.",
        "infiltration is identified.",
        "the lung shows diffuse infiltration.",
    ),
    "mass": (
        "a mass is identified in the lung.",
        "there is a rounded mass within the lung.",
        "the lung contains a well defined mass.",
        "a large mass projects over the lung.",
    ),
    "nodule": (
        "a small nodule is seen in the lung.",
        "there is a solitary nodule.",
        "the lung demonstrates a calcified nodule.",
        "a nodule is noted in the periphery.",
    ),
    "pneumonia": (
        "findings are consistent with pneumonia in the lung.",
        "there is pneumonia in the lower lung.",
        "pneumonia is suspected.",
        "the lung shows changes of pneumonia.",
    ),
    "pneumothorax": (
        "there is a small pneumothorax at the apex.",
        "a pneumothorax is present along the pleural margin.",
        "trace pneumothorax is seen.",
        "the pleural line indicates a pneumothorax.",
    ),
    "consolidation": (
        "there is consolidation in the airspace.",
        "dense consolidation is seen at the base.",
        "airspace consolidation is present.",
        "the lower zone shows consolidation.",
    ),
    "edema": (
        "there is interstitial edema in the lung.",
        "mild pulmonary edema is present.",
        "edema is seen bilaterally.",
        "the lung shows vascular congestion with edema.",
    ),
    "emphysema": (
        "the lung is hyperexpanded consistent with emphysema.",
        "emphysema is present.",
        "changes of emphysema are noted in the lung.",
        "severe emphysema is seen.",
    ),
    "fibrosis": (
        "there is fibrosis in the lung.",
        "reticular fibrosis is noted.",
        "the lung shows scarring with fibrosis.",
        "chronic fibrosis is present.",
    ),
    "thickening": (
        "there is pleural thickening.",
        "thickening of the pleural surface is seen.",
        "apical thickening is noted.",
        "the pleural margin shows smooth thickening.",
    ),
    "hernia": (
        "a hiatal hernia is present above the diaphragm.",
        "there is a hernia at the hiatus.",
        "hernia is again demonstrated.",
        "the diaphragm shows a large hernia.",
    ),
    "opacity": (
        "there is a focal opacity in the lung.",
        "an ill defined opacity is seen.",
        "the lung shows a rounded opacity.",
        "persistent opacity is noted.",
    ),
    "fracture": (
        "there is an acute rib fracture.",
        "a displaced fracture of the bone is seen.",
        "healed fracture is noted.",
        "the bone shows a fracture line.",
    ),
    "scoliosis": (
        "there is scoliosis of the spine.",
        "mild scoliosis is present.",
        "the bone alignment shows scoliosis.",
        "scoliosis is again noted.",
    ),
    "calcification": (
        "there is calcification in the mediastinum.",
        "dense calcification is seen centrally.",
        "the mediastinum shows calcification.",
        "scattered calcification is present.",
    ),
    "widening": (
        "there is widening of the mediastinum.",
        "the mediastinum shows widening.",
        "mild mediastinal widening is present.",
        "widening of the central contour is seen.",
    ),
    "elevation": (
        "there is elevation of the diaphragm.",
        "the diaphragm shows elevation.",
        "persistent elevation of the hemidiaphragm is seen.",
        "mild elevation is noted.",
    ),
}

# Must never mention a finding name (reports must mention each present
# finding exactly once, absent findings never).
DISTRACTOR_SENTENCES = (
    "the cardiomediastinal silhouette is stable.",
    "no acute osseous abnormality is identified.",
    "the visualized upper abdomen is unremarkable.",
    "lungs are clear bilaterally.",
    "no focal airspace disease is seen.",
    "heart size within normal limits.",
    "interval stability compared with the prior examination.",
    "the trachea is midline.",
    "surgical clips project over the chest.",
    "degenerative changes are again noted.",
    "osseous structures appear intact.",
    "there is no acute abnormality.",
    "support lines and tubes are in standard position.",
    "hilar contours are unremarkable.",
)


@dataclass(frozen=True)
class SyntheticScene:
    organs: tuple[str, ...]
    findings: tuple[str, ...]
    view: str = "frontal"

    def __post_init__(self):
        if len(self.findings) > 3:
            raise ValueError("at most 3 findings per scene")
        for f in self.findings:
            if FINDING_PARENT[f] not in self.organs:
                raise ValueError(f"finding {f!r} without its parent organ")


@dataclass(frozen=True)
class CorpusRecord:
    id: str
    image_path: str
    report: str
    labels: tuple[int, ...]
    split: str


@dataclass(frozen=True)
class VqaRecord:
    id: str
    image_id: str
    question: str
    answer: str
    qtype: str  # open | closed
    split: str


# ---------------------------------------------------------------------------
# rendering

def _grid():
    ys, xs = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    return ys.astype(np.float64), xs.astype(np.float64)


def _ellipse(cy, cx, ry, rx):
    ys, xs = _grid()
    return ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1.0


LUNG_L = (28.0, 20.0, 15.0, 10.0)   # cy, cx, ry, rx
LUNG_R = (28.0, 44.0, 15.0, 10.0)


def _draw_organs(img: np.ndarray, scene: SyntheticScene) -> None:
    organs = set(scene.organs)
    findings = set(scene.findings)
    if "mediastinum" in organs:
        half = 6 if "widening" in findings else 4
        img[10:50, 32 - half:32 + half] = np.maximum(img[10:50, 32 - half:32 + half], 60)
    if "lung" in organs:
        fill = 50 if "emphysema" in findings else 90
        img[_ellipse(*LUNG_L)] = fill
        img[_ellipse(*LUNG_R)] = fill
    if "airspace" in organs:
        inner = _ellipse(28, 20, 9, 6) | _ellipse(28, 44, 9, 6)
        img[inner] = np.maximum(img[inner], 105)
    if "pleural" in organs:
        width = 3.0 if "thickening" in findings else 1.2
        for cy, cx, ry, rx in (LUNG_L, LUNG_R):
            outer = _ellipse(cy, cx, ry + width, rx + width)
            img[outer & ~_ellipse(cy, cx, ry, rx)] = 160
    if "heart" in organs:
        r = 12.0 if "cardiomegaly" in findings else 8.0
        img[_ellipse(41, 36, r, r)] = 140
    if "diaphragm" in organs:
        ys, xs = _grid()
        base = 44.0 if "elevation" in findings else 50.0
        curve = base - 3.0 * np.sin(np.pi * xs / IMAGE_SIZE)
        band = (ys >= curve) & (ys <= curve + 2.0)
        img[band] = 150
    if "bone" in organs:
        for y in (12, 20, 28, 36):
            img[y, 4:60] = np.maximum(img[y, 4:60], 180)
        if "fracture" in findings:
            img[12, 10:16] = 20
            img[10, 10:16] = 180
        rows = np.arange(IMAGE_SIZE)
        if "scoliosis" in findings:
            spine = np.round(31 + 4 * np.sin(rows / 12.0)).astype(int)
        else:
            spine = np.full(IMAGE_SIZE, 31, dtype=int)
        for y in range(8, 56):
            img[y, spine[y]:spine[y] + 3] = 120


def _draw_findings(img: np.ndarray, scene: SyntheticScene, rng: np.random.Generator) -> None:
    findings = set(scene.findings)
    # organ-level findings (cardiomegaly, emphysema, thickening, widening,
    # elevation, scoliosis, fracture) are handled in _draw_organs
    if "atelectasis" in findings:
        img[30:33, 12:28] = 210
    if "effusion" in findings:
        ys, xs = _grid()
        wedge = (ys >= 38) & (ys <= 44) & (np.abs(xs - 20) <= (ys - 36))
        img[wedge] = 200
    if "infiltration" in findings:
        region = _ellipse(*LUNG_R)
        stripes = (np.arange(IMAGE_SIZE) % 3 == 0)[None, :] & region
        img[stripes] = np.minimum(img[stripes] + 70, 255)
    if "mass" in findings:
        img[_ellipse(24, 20, 5, 5)] = 230
    if "nodule" in findings:
        for _ in range(3):
            cy = 20 + rng.integers(0, 16)
            cx = 40 + rng.integers(0, 8)
            img[_ellipse(cy, cx, 1.6, 1.6)] = 245
    if "pneumonia" in findings:
        patch = rng.integers(60, 220, size=(10, 10))
        img[24:34, 16:26] = patch
    if "pneumothorax" in findings:
        crescent = _ellipse(18, 44, 7, 7) & ~_ellipse(20, 44, 7, 7)
        img[crescent] = 10
    if "consolidation" in findings:
        img[32:40, 40:50] = 215
    if "edema" in findings:
        ys, _ = _grid()
        region = _ellipse(*LUNG_L) | _ellipse(*LUNG_R)
        img[region] = np.minimum(img[region] + (ys[region] - 13) * 3.0, 255)
    if "fibrosis" in findings:
        ys, xs = _grid()
        region = (_ellipse(*LUNG_L) | _ellipse(*LUNG_R)) & ((ys + xs) % 5 < 1)
        img[region] = 190
    if "hernia" in findings:
        img[_ellipse(46, 32, 4, 4)] = 220
    if "opacity" in findings:
        ys, xs = _grid()
        blob = np.exp(-(((ys - 30) ** 2 + (xs - 44) ** 2) / 40.0))
        img += 110 * blob
    if "calcification" in findings:
        for cy, cx in ((16, 30), (22, 34), (30, 30), (38, 34)):
            img[cy:cy + 2, cx:cx + 2] = 250


def render_scene(scene: SyntheticScene, rng: np.random.Generator) -> np.ndarray:
    """Render a scene to a uint8 image; deterministic given the rng state."""
    img = np.full((IMAGE_SIZE, IMAGE_SIZE), 25.0)
    _draw_organs(img, scene)
    _draw_findings(img, scene, rng)
    img += rng.normal(0.0, 6.0, size=img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# pgm io

def write_pgm(path: str | Path, img: np.ndarray) -> None:
    h, w = img.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields: list[bytes] = []
    i = 0
    while len(fields) < 4:
        while data[i:i + 1].isspace():
            i += 1
        if data[i:i + 1] == b"#":
            while data[i:i + 1] not in (b"\n", b""):
                i += 1
            continue
        start = i
        while not data[i:i + 1].isspace():
            i += 1
        fields.append(data[start:i])
    if fields[0] != b"P5" or fields[3] != b"255":
        raise ValueError(f"unsupported pgm header in {path}")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(data[i + 1:i + 1 + w * h], dtype=np.uint8).reshape(h, w).copy()


# ---------------------------------------------------------------------------
# sampling

def sample_scene(rng: np.random.Generator) -> SyntheticScene:
    n_primary = int(rng.choice([0, 1, 2], p=[0.15, 0.60, 0.25]))
    pool = list(FINDINGS)
    findings: list[str] = []
    for _ in range(n_primary):
        pick = pool[int(rng.integers(len(pool)))]
        findings.append(pick)
        pool.remove(pick)
    for f in list(findings):
        partner = RELATED.get(f)
        if partner and partner not in findings and len(findings) < 3:
            if rng.random() < RELATED_PROB:
                findings.append(partner)
                if partner in pool:
                    pool.remove(partner)
    organs = set(ALWAYS_PRESENT)
    organs.update(FINDING_PARENT[f] for f in findings)
    for organ in ORGANS:
        if organ not in organs and rng.random() < 0.6:
            organs.add(organ)
    ordered = tuple(o for o in ORGANS if o in organs)
    return SyntheticScene(organs=ordered, findings=tuple(findings))


def compose_report(scene: SyntheticScene, rng: np.random.Generator) -> str:
    """3-8 sentences, >=60% distractors, each finding mentioned exactly once."""
    finding_sents = [FINDING_TEMPLATES[f][int(rng.integers(4))] for f in scene.findings]
    n_find = len(finding_sents)
    d_min = max(math.ceil(1.5 * n_find), 3 - n_find)
    d_max = 8 - n_find
    n_distract = int(rng.integers(d_min, d_max + 1))
    distractors = [DISTRACTOR_SENTENCES[i]
                   for i in rng.choice(len(DISTRACTOR_SENTENCES), n_distract, replace=False)]
    sentences = finding_sents + distractors
    order = rng.permutation(len(sentences))
    return " ".join(sentences[i] for i in order)


def labels_for(findings: tuple[str, ...]) -> tuple[int, ...]:
    vec = [0] * len(LABEL_NAMES)
    for f in findings:
        idx = FINDING_TO_LABEL.get(f)
        if idx is not None:
            vec[idx] = 1
    return tuple(vec)


def build_triplet_store() -> TripletStore:
    triplets = [Triplet(f, "located at", FINDING_PARENT[f]) for f in FINDINGS]
    triplets += [Triplet(a, "suggestive of", b) for a, b in RELATED.items()]
    return TripletStore.from_triplets(triplets)


def build_lexicon() -> EntityLexicon:
    return EntityLexicon.from_words(FINDINGS + ORGANS)


# ---------------------------------------------------------------------------
# generation and loading

def _assign_splits(n: int, fractions: tuple[float, float, float],
                   rng: np.random.Generator) -> list[str]:
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise ValueError("split fractions must be nonnegative and sum to 1")
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    names = ["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val)
    order = rng.permutation(n)
    out = [""] * n
    for pos, name in zip(order, names):
        out[pos] = name
    return out


def gen_corpus(out_dir: str | Path, seed: int, n_records: int,
               fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)) -> "Corpus":
    """Generate the corpus files; byte-identical for a fixed seed."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    splits = _assign_splits(n_records, fractions, np.random.default_rng((seed, 0xC0)))
    records = []
    for idx in range(n_records):
        rng = np.random.default_rng((seed, idx))
        scene = sample_scene(rng)
        rec_id = f"r{idx:05d}"
        image_rel = f"images/{rec_id}.pgm"
        write_pgm(out / image_rel, render_scene(scene, rng))
        records.append(CorpusRecord(
            id=rec_id, image_path=image_rel,
            report=compose_report(scene, rng),
            labels=labels_for(scene.findings), split=splits[idx]))
    with (out / "corpus.jsonl").open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({"id": r.id, "image_path": r.image_path,
                                 "report": r.report, "labels": list(r.labels),
                                 "split": r.split}) + "\n")
    build_triplet_store().save(out / "triplets.tsv")
    build_lexicon().save(out / "lexicon.txt")
    return Corpus(out)


def gen_vqa(corpus_dir: str | Path, seed: int) -> list[VqaRecord]:
    """Question/answer records for every corpus image; writes vqa.jsonl."""
    corpus = Corpus(corpus_dir)
    out: list[VqaRecord] = []
    for rec in corpus.records:
        rng = np.random.default_rng((seed, 0xA5, int(rec.id[1:])))
        # reports mention each present finding exactly once, so presence can
        # be recovered from the text (labels miss the unlabeled findings)
        words = set(normalize_words(rec.report))
        present = tuple(f for f in FINDINGS if f in words)
        absent = tuple(f for f in FINDINGS if f not in present)
        qs: list[tuple[str, str, str]] = []
        if present:
            focus = present[int(rng.integers(len(present)))]
            qs.append((f"is there {focus} ?", "yes", "closed"))
            qs.append(("which organ is abnormal ?", FINDING_PARENT[focus], "open"))
            qs.append(("what finding is present ?", focus, "open"))
        miss = absent[int(rng.integers(len(absent)))]
        qs.append((f"is there {miss} ?", "no", "closed"))
        for k, (q, a, t) in enumerate(qs):
            out.append(VqaRecord(id=f"{rec.id}-q{k}", image_id=rec.id,
                                 question=q, answer=a, qtype=t, split=rec.split))
    with (Path(corpus_dir) / "vqa.jsonl").open("w", encoding="utf-8") as fh:
        for v in out:
            fh.write(json.dumps({"id": v.id, "image_id": v.image_id,
                                 "question": v.question, "answer": v.answer,
                                 "qtype": v.qtype, "split": v.split}) + "\n")
    return out


class Corpus:
    """Reader for a generated corpus directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.records: list[CorpusRecord] = []
        with (self.root / "corpus.jsonl").open(encoding="utf-8") as fh:
            for line in fh:
                d = json.loads(line)
                self.records.append(CorpusRecord(
                    id=d["id"], image_path=d["image_path"], report=d["report"],
                    labels=tuple(d["labels"]), split=d["split"]))
        self.by_id = {r.id: r for r in self.records}

    def split(self, name: str) -> list[CorpusRecord]:
        return [r for r in self.records if r.split == name]

    def load_image(self, rec: CorpusRecord) -> np.ndarray:
        return read_pgm(self.root / rec.image_path).astype(np.float32) / 255.0

    @property
    def report_lookup(self) -> dict[str, str]:
        return {r.id: r.report for r in self.records}

    def load_store(self) -> TripletStore:
        return TripletStore.load(self.root / "triplets.tsv")

    def load_lexicon(self) -> EntityLexicon:
        return EntityLexicon.load(self.root / "lexicon.txt")

    def vqa_records(self) -> list[VqaRecord]:
        path = self.root / "vqa.jsonl"
        if not path.exists():
            return []
        out = []
        with path.open(encoding="utf-8") as fh:
            for line in fh:
                d = json.loads(line)
                out.append(VqaRecord(**d))
        return out
