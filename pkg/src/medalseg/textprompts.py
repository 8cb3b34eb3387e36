"""Text prompt resolution: modality detection, class/variant mappings,
longest-match lookup, and the pluggable text-encoder contract.

Mappings are built once from a prompt corpus JSON (dataset prefixes carry
the modality; each dataset lists canonical class names for anatomy l=0 or
lesions l=1). Variants are generated from a base-synonym table plus
directional handling, and lookup picks the longest matching term.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import InvalidArgumentError, MappingBuildError, UnresolvedClassError, UnresolvedModalityError
from .volume import MODALITIES

ANATOMY, LESION = 0, 1

_WS = re.compile(r"\s+")

_DIR_LEFT = re.compile(r"\bleft\b|\bl\.")
_DIR_RIGHT = re.compile(r"\bright\b|\br\.")
_DIR_BILATERAL = re.compile(r"\bbilateral\b")


def _norm(text: str) -> str:
    return _WS.sub(" ", text.strip().lower())


@dataclass
class TextQuery:
    sentence: str
    instance_label: int
    modality: str
    class_id: int
    class_name: str
    embedding: np.ndarray | None = None


@dataclass
class ClassMapping:
    """per-modality, per-instance-label: canonical name -> unique id."""

    table: dict = field(default_factory=dict)  # modality -> {"0": {...}, "1": {...}}

    def ids(self, modality: str, l: int) -> dict:
        return self.table.get(modality, {}).get(str(l), {})

    def to_json(self) -> str:
        return json.dumps(self.table, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ClassMapping":
        return cls(table=json.loads(text))


@dataclass
class VariantMapping:
    """variant term -> canonical name, plus direction-requiring bare terms."""

    variants: dict = field(default_factory=dict)     # modality -> l -> {variant: canonical}
    directional: dict = field(default_factory=dict)  # modality -> l -> {bare: {left/right: canonical}}

    def terms(self, modality: str, l: int) -> dict:
        return self.variants.get(modality, {}).get(str(l), {})

    def directed(self, modality: str, l: int) -> dict:
        return self.directional.get(modality, {}).get(str(l), {})

    def to_json(self) -> str:
        return json.dumps({"variants": self.variants, "directional": self.directional},
                          indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "VariantMapping":
        doc = json.loads(text)
        return cls(variants=doc["variants"], directional=doc["directional"])


def default_corpus_path() -> Path:
    return Path(__file__).parent / "data" / "prompt_corpus.json"


def load_corpus(path=None) -> dict:
    return json.loads(Path(path or default_corpus_path()).read_text())


def detect_modality(sentence: str, keywords: dict | None = None) -> str:
    """Pick the modality whose keyword matches; longer keywords win."""
    if not sentence or not sentence.strip():
        raise InvalidArgumentError("empty sentence")
    if keywords is None:
        keywords = load_corpus()["modality_keywords"]
    s = _norm(sentence)
    hits = []
    for modality, words in keywords.items():
        for w in words:
            if re.search(r"(?<![a-z0-9])" + re.escape(w.lower()) + r"(?![a-z0-9])", s):
                hits.append((len(w), modality))
    if not hits:
        raise UnresolvedModalityError(f"no modality keyword in: {sentence!r}")
    hits.sort(key=lambda h: (-h[0], h[1]))
    return hits[0][1]


def _word_sub(name: str, find: str, repl: str) -> str | None:
    pat = r"\b" + re.escape(find) + r"\b"
    if re.search(pat, name):
        return re.sub(pat, repl, name)
    return None


def _synonym_forms(canon_lower: str, base_synonyms: dict) -> list[str]:
    """All single- and double-substitution synonym rewrites of a name."""
    forms = {canon_lower}
    for base, syns in sorted(base_synonyms.items()):
        for syn in syns:
            for f in sorted(forms):
                sub = _word_sub(f, base, syn)
                if sub:
                    forms.add(sub)
    forms.discard(canon_lower)
    return sorted(forms)


def build_mappings(corpus: dict) -> tuple[ClassMapping, VariantMapping]:
    """Derive the class and variant mappings from the prompt corpus.

    Ids are assigned per modality: anatomy classes first in sorted order
    starting at 1, then lesion classes. Deterministic: same corpus bytes
    give identical mapping JSON.
    """
    by_modality: dict = {}
    for ds in corpus["datasets"]:
        modality = ds["prefix"].split("_")[0]
        if modality not in MODALITIES:
            raise MappingBuildError(f"dataset prefix {ds['prefix']!r} has unknown modality")
        l = int(ds["instance_label"])
        if l not in (ANATOMY, LESION):
            raise MappingBuildError(f"bad instance label {l} in {ds['prefix']!r}")
        by_modality.setdefault(modality, {ANATOMY: set(), LESION: set()})[l].update(ds["classes"])

    cmap = ClassMapping()
    for modality, groups in sorted(by_modality.items()):
        next_id = 1
        table: dict = {}
        for l in (ANATOMY, LESION):
            entry = {}
            for name in sorted(groups[l]):
                entry[name] = next_id
                next_id += 1
            table[str(l)] = entry
        cmap.table[modality] = table

    base_synonyms = corpus.get("base_synonyms", {})
    vmap = VariantMapping()
    for modality, table in cmap.table.items():
        vmap.variants[modality] = {}
        vmap.directional[modality] = {}
        for l_str, ids in table.items():
            variants: dict = {}
            directional: dict = {}
            canon_lowers = {c.lower() for c in ids}
            for canon in sorted(ids):
                clow = canon.lower()
                forms = [clow] + _synonym_forms(clow, base_synonyms)
                for form in forms:
                    if form != clow and form not in canon_lowers:
                        # a synonym that collided with a real class name is skipped
                        prior = variants.get(form)
                        if prior is not None and prior != canon:
                            raise MappingBuildError(
                                f"variant {form!r} maps to both {prior!r} and {canon!r}")
                        variants[form] = canon
                    # directional: "left x"/"right x" also register the bare
                    # term, resolvable only when the sentence names a side
                    for side in ("left", "right"):
                        if form.startswith(side + " "):
                            bare = form[len(side) + 1:]
                            slot = directional.setdefault(bare, {})
                            if slot.get(side, canon) != canon:
                                raise MappingBuildError(f"directional conflict on {bare!r}")
                            slot[side] = canon
                            abbrev = side[0] + ". " + bare
                            if abbrev not in canon_lowers and variants.get(abbrev, canon) == canon:
                                variants[abbrev] = canon
            vmap.variants[modality][l_str] = variants
            vmap.directional[modality][l_str] = directional
    return cmap, vmap


def detect_direction(sentence: str) -> str | None:
    s = _norm(sentence)
    if _DIR_BILATERAL.search(s):
        return "bilateral"
    left, right = bool(_DIR_LEFT.search(s)), bool(_DIR_RIGHT.search(s))
    if left and not right:
        return "left"
    if right and not left:
        return "right"
    return None


def resolve_prompt(sentence: str, l: int, mapping: ClassMapping, variants: VariantMapping,
                   modality: str | None = None) -> tuple[int, str]:
    """Longest-match class resolution with directional refinement."""
    m = modality or detect_modality(sentence)
    s = _norm(sentence)
    ids = mapping.ids(m, l)
    if not ids:
        raise UnresolvedClassError(f"no classes known for modality {m}, instance label {l}")

    candidates = []  # (term, canonical)
    for canon in ids:
        if canon.lower() in s:
            candidates.append((canon.lower(), canon))
    for term, canon in variants.terms(m, l).items():
        if term in s:
            candidates.append((term, canon))

    direction = detect_direction(sentence)
    if direction in ("left", "right"):
        for bare, sides in variants.directed(m, l).items():
            if bare in s and direction in sides:
                candidates.append((bare, sides[direction]))

    if not candidates:
        raise UnresolvedClassError(f"no class term found in: {sentence!r} (modality {m}, l={l})")

    candidates.sort(key=lambda c: (-len(c[0]), c[1]))
    term, canon = candidates[0]

    if direction == "bilateral":
        for side in ("Left ", "Right "):
            if canon.startswith(side):
                undirected = canon[len(side):].capitalize()
                if undirected in ids:
                    canon = undirected
                break
    return ids[canon], canon


def resolve_query(sentence: str, l: int, mapping: ClassMapping, variants: VariantMapping,
                  modality: str | None = None) -> TextQuery:
    m = modality or detect_modality(sentence)
    c_id, c_name = resolve_prompt(sentence, l, mapping, variants, modality=m)
    return TextQuery(sentence=sentence, instance_label=l, modality=m, class_id=c_id, class_name=c_name)


class TextEncoder(Protocol):
    dim: int

    def encode(self, queries: Sequence[TextQuery]) -> np.ndarray: ...


def _stable_seed(*parts) -> int:
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


class ToyTextEncoder:
    """Deterministic stand-in encoder.

    The first `slots` dimensions carry a one-hot class-slot indicator
    (slot = (class_id - 1) mod slots); the rest is seeded unit Gaussian
    noise scaled by `noise`, so distinct classes stay distinguishable while
    same-slot embeddings remain close. Output rows are unit-norm.
    """

    def __init__(self, dim: int = 768, slots: int = 24, noise: float = 0.5, seed: int = 0):
        if dim <= slots:
            raise InvalidArgumentError("embedding dim must exceed slot count")
        self.dim = dim
        self.slots = slots
        self.noise = noise
        self.seed = seed

    def encode_one(self, q: TextQuery) -> np.ndarray:
        z = np.zeros(self.dim)
        z[(q.class_id - 1) % self.slots] = 1.0
        rng = np.random.default_rng(_stable_seed("toy-text", self.seed, q.modality, q.instance_label, q.class_id))
        g = rng.standard_normal(self.dim - self.slots)
        z[self.slots:] = self.noise * g / np.linalg.norm(g)
        return z / np.linalg.norm(z)

    def encode(self, queries: Sequence[TextQuery]) -> np.ndarray:
        return np.stack([self.encode_one(q) for q in queries])


def encode_text(query: TextQuery, encoder: TextEncoder) -> np.ndarray:
    query.embedding = encoder.encode([query])[0]
    return query.embedding
