"""ShapesWorld: a deterministic synthetic corpus with exact labels.

36 scenes (3 shapes x 3 colors x 4 quadrants) render to 16x16 RGB rasters.
The renderer doubles as a grading oracle: nearest-template matching over
the 36 rasters classifies any image, so both the QA path and the image
generation path can be scored programmatically.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue")
POSITIONS = ("top-left", "top-right", "bottom-left", "bottom-right")

IMG_SIDE = 16
REGION_SIDE = 6  # shape footprint, centered in its 8x8 quadrant

# Special tokens occupy fixed ids 0-4.
PAD, BOI, EOI, EOS, NULL = "|PAD|", "|BOI|", "|EOI|", "|EOS|", "|NULL|"

VOCAB = (
    PAD, BOI, EOI, EOS, NULL,
    "circle", "square", "triangle",
    "red", "green", "blue",
    "top-left", "top-right", "bottom-left", "bottom-right",
    "what", "where", "shape", "color",
    "the", "a", "is", "at", "in", "of", "this",
    "draw", "show", "picture", "it", "answer", "here",
)

TOK2ID = {tok: i for i, tok in enumerate(VOCAB)}
PAD_ID, BOI_ID, EOI_ID, EOS_ID, NULL_ID = (TOK2ID[t] for t in (PAD, BOI, EOI, EOS, NULL))

QUESTIONS = ("what shape", "what color", "where")


@dataclass(frozen=True)
class ShapeSpec:
    shape: str
    color: str
    position: str

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS:
            raise ValueError(f"unknown color {self.color!r}")
        if self.position not in POSITIONS:
            raise ValueError(f"unknown position {self.position!r}")


@dataclass(frozen=True)
class UndSample:
    image: np.ndarray
    question_tokens: tuple
    answer_tokens: tuple  # includes the trailing |EOS|
    spec: ShapeSpec


@dataclass(frozen=True)
class GenSample:
    caption_tokens: tuple
    image: np.ndarray
    spec: ShapeSpec


@dataclass
class Corpus:
    seed: int
    und: list
    gen: list
    text: list  # list of id tuples


def all_specs():
    return [ShapeSpec(s, c, p) for s in SHAPES for c in COLORS for p in POSITIONS]


def _region_mask(shape):
    """Boolean 6x6 footprint for one shape kind."""
    r = np.arange(REGION_SIDE)[:, None]
    c = np.arange(REGION_SIDE)[None, :]
    if shape == "square":
        return np.ones((REGION_SIDE, REGION_SIDE), dtype=bool)
    if shape == "circle":
        return (r - 2.5) ** 2 + (c - 2.5) ** 2 <= 6.5
    # upward-pointing triangle: widens towards the bottom row
    return np.abs(c - 2.5) <= (r + 1) / 2.0


_REGION_MASKS = {s: _region_mask(s) for s in SHAPES}

_QUADRANT_ORIGIN = {
    "top-left": (0, 0),
    "top-right": (0, 8),
    "bottom-left": (8, 0),
    "bottom-right": (8, 8),
}


def render_shape(spec: ShapeSpec) -> np.ndarray:
    """Deterministic 16x16x3 raster: one shape, one pure color channel."""
    img = np.zeros((IMG_SIDE, IMG_SIDE, 3), dtype=np.float32)
    r0, c0 = _QUADRANT_ORIGIN[spec.position]
    r0 += 1  # 6x6 centered in the 8x8 quadrant
    c0 += 1
    chan = COLORS.index(spec.color)
    mask = _REGION_MASKS[spec.shape]
    img[r0:r0 + REGION_SIDE, c0:c0 + REGION_SIDE, chan] = mask.astype(np.float32)
    return img


def _templates():
    specs = all_specs()
    stack = np.stack([render_shape(s) for s in specs]).reshape(len(specs), -1)
    return specs, stack


_TEMPLATE_SPECS, _TEMPLATE_MAT = _templates()

# Half the minimum pairwise template distance: guarantees that any image
# within tau of a template is closer to it than to every other template.
_d2 = ((_TEMPLATE_MAT[:, None, :] - _TEMPLATE_MAT[None, :, :]) ** 2).sum(-1)
np.fill_diagonal(_d2, np.inf)
MIN_TEMPLATE_GAP = float(np.sqrt(_d2.min()))
TAU_CLS = MIN_TEMPLATE_GAP / 2.0


def oracle_classify(img: np.ndarray):
    """Nearest-template label, or None when nothing is within tau."""
    if img.shape != (IMG_SIDE, IMG_SIDE, 3):
        raise ValueError(f"expected {(IMG_SIDE, IMG_SIDE, 3)} image, got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    flat = np.asarray(img, dtype=np.float64).reshape(-1)
    d = np.sqrt(((flat[None, :] - _TEMPLATE_MAT) ** 2).sum(-1))
    best = int(np.argmin(d))
    if d[best] > TAU_CLS:
        return None
    return _TEMPLATE_SPECS[best]


def tokenize(text: str):
    """Whitespace tokenizer over the closed vocabulary."""
    ids = []
    for word in text.split():
        if word not in TOK2ID:
            raise ValueError(f"unknown word {word!r}")
        ids.append(TOK2ID[word])
    return ids


def detokenize(ids) -> str:
    words = []
    for i in ids:
        if not 0 <= int(i) < len(VOCAB):
            raise ValueError(f"token id {i} out of range")
        words.append(VOCAB[int(i)])
    return " ".join(words)


def caption_text(spec: ShapeSpec, short=False) -> str:
    if short:
        return f"{spec.color} {spec.shape}"
    return f"{spec.color} {spec.shape} {spec.position}"


def question_answer(spec: ShapeSpec, question: str):
    """Reference answer word for one of the three question templates."""
    if question == "what shape":
        return spec.shape
    if question == "what color":
        return spec.color
    if question == "where":
        return spec.position
    raise ValueError(f"unknown question template {question!r}")


_TEXT_TEMPLATES = (
    "the {color} {shape} is at {position}",
    "a {color} {shape} in the picture",
    "this is a {color} {shape} at {position}",
    "show a picture of the {color} {shape}",
)


def make_corpus(seed: int, n_und: int, n_gen: int, n_text: int) -> Corpus:
    """Sample a corpus of QA pairs, captioned images and plain sentences.

    Deterministic in `seed`. 25% of generation captions drop the position
    word (short-prompt data); captions always describe their image exactly.
    """
    if min(n_und, n_gen, n_text) < 0:
        raise ValueError("sample counts must be >= 0")
    rng = np.random.default_rng(seed)
    specs = all_specs()

    und = []
    for _ in range(n_und):
        spec = specs[rng.integers(len(specs))]
        q = QUESTIONS[rng.integers(len(QUESTIONS))]
        ans = question_answer(spec, q)
        und.append(UndSample(
            image=render_shape(spec),
            question_tokens=tuple(tokenize(q)),
            answer_tokens=tuple(tokenize(ans)) + (EOS_ID,),
            spec=spec,
        ))

    gen = []
    for _ in range(n_gen):
        spec = specs[rng.integers(len(specs))]
        short = rng.random() < 0.25
        gen.append(GenSample(
            caption_tokens=tuple(tokenize(caption_text(spec, short))),
            image=render_shape(spec),
            spec=spec,
        ))

    text = []
    for _ in range(n_text):
        spec = specs[rng.integers(len(specs))]
        tmpl = _TEXT_TEMPLATES[rng.integers(len(_TEXT_TEMPLATES))]
        sent = tmpl.format(color=spec.color, shape=spec.shape, position=spec.position)
        text.append(tuple(tokenize(sent)) + (EOS_ID,))

    return Corpus(seed=seed, und=und, gen=gen, text=text)


# --- directory export / import ------------------------------------------
#
# manifest.txt: counts + seed + vocab (one token per line)
# images.f32:   raw little-endian float32, row-major; all und images then
#               all gen images
# sequences.txt: one id list per line, "U|G|T" prefix; U lines embed the
#               image slot as the |BOI| |EOI| pair between question/answer


def save_corpus(corpus: Corpus, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as f:
        f.write(f"seed {corpus.seed}\n")
        f.write(f"n_und {len(corpus.und)}\n")
        f.write(f"n_gen {len(corpus.gen)}\n")
        f.write(f"n_text {len(corpus.text)}\n")
        f.write(f"vocab {len(VOCAB)}\n")
        for tok in VOCAB:
            f.write(tok + "\n")

    imgs = [s.image for s in corpus.und] + [s.image for s in corpus.gen]
    blob = (np.stack(imgs).astype("<f4").tobytes() if imgs else b"")
    with open(os.path.join(out_dir, "images.f32"), "wb") as f:
        f.write(blob)

    with open(os.path.join(out_dir, "sequences.txt"), "w", encoding="utf-8") as f:
        for s in corpus.und:
            ids = list(s.question_tokens) + [BOI_ID, EOI_ID] + list(s.answer_tokens)
            f.write("U " + " ".join(map(str, ids)) + "\n")
        for s in corpus.gen:
            f.write(("G " + " ".join(map(str, s.caption_tokens))).rstrip() + "\n")
        for ids in corpus.text:
            f.write("T " + " ".join(map(str, ids)) + "\n")


def load_corpus(in_dir: str) -> Corpus:
    with open(os.path.join(in_dir, "manifest.txt"), encoding="utf-8") as f:
        lines = f.read().splitlines()
    header = dict(line.split(" ", 1) for line in lines[:5])
    seed = int(header["seed"])
    n_und, n_gen = int(header["n_und"]), int(header["n_gen"])
    vocab = lines[5:5 + int(header["vocab"])]
    if tuple(vocab) != VOCAB:
        raise ValueError("corpus vocabulary does not match this build")

    raw = np.fromfile(os.path.join(in_dir, "images.f32"), dtype="<f4")
    imgs = raw.reshape(-1, IMG_SIDE, IMG_SIDE, 3)
    if imgs.shape[0] != n_und + n_gen:
        raise ValueError("images.f32 length disagrees with manifest counts")

    und, gen, text = [], [], []
    with open(os.path.join(in_dir, "sequences.txt"), encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            prefix, _, rest = line.partition(" ")
            ids = [int(x) for x in rest.split()] if rest else []
            if prefix == "U":
                b, e = ids.index(BOI_ID), ids.index(EOI_ID)
                img = imgs[len(und)]
                q, a = tuple(ids[:b]), tuple(ids[e + 1:])
                spec = oracle_classify(img)
                und.append(UndSample(image=img, question_tokens=q,
                                     answer_tokens=a, spec=spec))
            elif prefix == "G":
                img = imgs[n_und + len(gen)]
                gen.append(GenSample(caption_tokens=tuple(ids), image=img,
                                     spec=oracle_classify(img)))
            elif prefix == "T":
                text.append(tuple(ids))
            else:
                raise ValueError(f"bad split prefix {prefix!r}")
    return Corpus(seed=seed, und=und, gen=gen, text=text)
