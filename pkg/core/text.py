"""Caption normalization, caption manifests and text embedding providers."""

import hashlib
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Union

import numpy as np

from core.errors import ConfigError, DataError
from core.params import load_array, save_array

logger = logging.getLogger("EqDiff")

DEFAULT_RULES = Path(__file__).parent / "data" / "caption_rules.tsv"
RULE_KINDS = ("replace_word", "replace_phrase", "remove_phrase", "resolve_conflict")
TOKEN = re.compile(r"[a-z0-9']+")
MAX_PASSES = 16


@dataclass(frozen=True)
class RewriteRule:
    priority: int
    kind: str
    pattern: str
    replacement: str = ""

    def __post_init__(self):
        if self.kind not in RULE_KINDS:
            raise ConfigError(f"unknown rule kind {self.kind!r}; expected one of {', '.join(RULE_KINDS)}")
        if not self.pattern.strip():
            raise ConfigError("rule pattern must not be empty")
        if self.kind == "resolve_conflict" and len(self.alternatives) < 2:
            raise ConfigError(f"conflict rule {self.pattern!r} needs at least two '|'-separated phrases")
        if self.kind in ("replace_word", "replace_phrase") and _phrase_regex(self.pattern).search(self.replacement):
            raise ConfigError(f"replacement {self.replacement!r} re-introduces its own pattern {self.pattern!r}")

    @property
    def alternatives(self) -> list[str]:
        return [tokenize(p) for p in self.pattern.split("|") if tokenize(p)]

    def apply(self, text: str) -> str:
        if self.kind == "resolve_conflict":
            return _resolve_conflict(text, self.alternatives)
        replacement = "" if self.kind == "remove_phrase" else tokenize(self.replacement)
        return _squash(_phrase_regex(self.pattern).sub(replacement, text))


def tokenize(text: str) -> str:
    """Lowercase, drop punctuation, single-space the remaining tokens."""
    return " ".join(TOKEN.findall(text.lower()))


def _squash(text: str) -> str:
    return " ".join(text.split())


def _phrase_regex(phrase: str) -> re.Pattern:
    return re.compile(r"(?<!\S)" + re.escape(tokenize(phrase)) + r"(?!\S)")


def _resolve_conflict(text: str, alternatives: list[str]) -> str:
    hits = []
    for phrase in alternatives:
        match = _phrase_regex(phrase).search(text)
        if match:
            hits.append((match.start(), phrase))
    if len(hits) < 2:
        return text
    keep = min(hits)[1]
    for _, phrase in hits:
        if phrase != keep:
            text = _phrase_regex(phrase).sub("", text)
    return _squash(text)


def load_rules(path: Union[str, Path, None] = None) -> list[RewriteRule]:
    """Read a ``priority<TAB>kind<TAB>pattern<TAB>replacement`` table, sorted for application."""
    path = Path(path) if path else DEFAULT_RULES
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot read rule file {path}: {e}") from e
    rules = []
    for number, line in enumerate(lines, start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) not in (3, 4):
            raise ConfigError(f"{path}:{number}: expected 3 or 4 tab-separated fields, got {len(fields)}")
        try:
            priority = int(fields[0])
        except ValueError as e:
            raise ConfigError(f"{path}:{number}: priority {fields[0]!r} is not an integer") from e
        replacement = fields[3] if len(fields) == 4 else ""
        try:
            rules.append(RewriteRule(priority, fields[1].strip(), fields[2], replacement))
        except ConfigError as e:
            raise ConfigError(f"{path}:{number}: {e}") from e
    # sorted() is stable, so equal priorities keep file order
    return sorted(rules, key=lambda rule: rule.priority)


def normalize_caption(raw: str, rules: Optional[list[RewriteRule]] = None) -> str:
    """Apply the rule table until the caption stops changing."""
    rules = load_rules() if rules is None else rules
    text = tokenize(raw)
    for _ in range(MAX_PASSES):
        before = text
        for rule in rules:
            text = rule.apply(text)
        if text == before:
            break
    return text


@dataclass
class CaptionRecord:
    frame_id: str
    raw: str
    normalized: str


@dataclass
class PairManifest:
    """Caption records in file order plus the number of duplicate ids seen."""

    records: list[CaptionRecord] = field(default_factory=list)
    duplicates: int = 0

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[CaptionRecord]:
        return iter(self.records)

    def __getitem__(self, index: int) -> CaptionRecord:
        return self.records[index]

    def by_frame(self) -> dict[str, CaptionRecord]:
        return {record.frame_id: record for record in self.records}


def load_pairs(path, rules: Optional[list[RewriteRule]] = None) -> PairManifest:
    """Parse ``frame_id<TAB>caption`` lines; a repeated id keeps its first slot and last caption."""
    rules = load_rules() if rules is None else rules
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as e:
        raise DataError(f"cannot read caption manifest {path}: {e}") from e
    slots: dict[str, int] = {}
    manifest = PairManifest()
    for number, line in enumerate(lines, start=1):
        if not line.strip() or line.startswith("#"):
            continue
        frame_id, sep, caption = line.partition("\t")
        if not sep or not frame_id.strip():
            raise DataError(f"{path}:{number}: expected 'frame_id<TAB>caption'")
        frame_id = frame_id.strip()
        record = CaptionRecord(frame_id, caption, normalize_caption(caption, rules))
        if frame_id in slots:
            manifest.duplicates += 1
            manifest.records[slots[frame_id]] = record
        else:
            slots[frame_id] = len(manifest.records)
            manifest.records.append(record)
    if manifest.duplicates:
        logger.warning(f"{path}: {manifest.duplicates} duplicate frame ids, last caption kept")
    return manifest


def write_pairs(records: Iterable[CaptionRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as file:
        for record in records:
            file.write(f"{record.frame_id}\t{record.normalized}\n")


def token_frequencies(records: Iterable[CaptionRecord]) -> Counter:
    counts = Counter()
    for record in records:
        counts.update(record.normalized.split())
    return counts


def write_frequency_report(counts: Counter, path) -> None:
    with open(path, "w", encoding="utf-8") as file:
        file.write("token\tcount\n")
        for token, count in sorted(counts.items(), key=lambda item: (-item[1], item[0])):
            file.write(f"{token}\t{count}\n")


@dataclass
class TextEmbedding:
    vector: np.ndarray
    provider: str


def _unit(vector: np.ndarray, provider: str) -> TextEmbedding:
    norm = float(np.linalg.norm(vector))
    if norm == 0.0:
        return TextEmbedding(np.zeros_like(vector), "empty")
    return TextEmbedding(vector / norm, provider)


class HashedBowProvider:
    """Signed feature hashing of caption tokens into ``dim`` buckets."""

    name = "hashed_bow"

    def __init__(self, dim: int = 512, seed: int = 0):
        if dim < 1:
            raise ConfigError(f"embedding dim must be positive, got {dim}")
        self.dim = dim
        self.seed = seed

    def _hash(self, token: str) -> int:
        digest = hashlib.blake2b(f"{self.seed}:{token}".encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")

    def embed(self, caption: str) -> TextEmbedding:
        vector = np.zeros(self.dim)
        for token in tokenize(caption).split():
            value = self._hash(token)
            vector[value % self.dim] += -1.0 if value >> 63 else 1.0
        return _unit(vector, self.name)


class FileLookupProvider:
    """Precomputed vectors keyed by normalized caption."""

    name = "file_lookup"

    def __init__(self, bank):
        self.bank = str(bank)
        self.vectors, sidecar = load_array(bank)
        try:
            self.index = {str(k): int(v) for k, v in sidecar["index"].items()}
            self.dim = int(sidecar["dim"])
        except (KeyError, AttributeError, ValueError) as e:
            raise DataError(f"{bank}: embedding bank index is malformed: {e}") from e
        if self.vectors.ndim != 2 or self.vectors.shape[1] != self.dim:
            raise DataError(f"{bank}: bank rows have shape {self.vectors.shape}, index says dim {self.dim}")

    def embed(self, caption: str) -> TextEmbedding:
        row = self.index.get(caption)
        if row is None:
            raise DataError(f"caption {caption!r} is not in embedding bank {self.bank}")
        return _unit(self.vectors[row].copy(), self.name)


def write_embedding_bank(stem, vectors: dict[str, np.ndarray]) -> None:
    captions = list(vectors)
    matrix = np.stack([np.asarray(vectors[c], dtype=np.float64) for c in captions]) if captions else np.zeros((0, 0))
    dim = int(matrix.shape[1]) if captions else 0
    save_array(stem, matrix, meta={"dim": dim, "index": {c: i for i, c in enumerate(captions)}})


def make_provider(kind: str, dim: int = 512, seed: int = 0, bank: Optional[str] = None):
    if kind == HashedBowProvider.name:
        return HashedBowProvider(dim, seed)
    if kind == FileLookupProvider.name:
        if not bank:
            raise ConfigError("file_lookup provider needs an embedding bank path")
        return FileLookupProvider(bank)
    raise ConfigError(f"unknown embedding provider {kind!r}; expected hashed_bow or file_lookup")


def embed_text(caption: str, provider) -> TextEmbedding:
    return provider.embed(caption)
