"""Personalized QA instances: data model, JSONL I/O, synthetic worlds and splits.

A synthetic world assigns every user a handful of latent attributes (occupation,
diet, ...). Each attribute value is written into exactly one profile document and
becomes the keyphrase of a rubric aspect. Questions only ever name the attribute,
never its value, so an answer can reach full reward only after retrieving from
the profile.
"""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

from ._text import tokenize

logger = logging.getLogger(__name__)

__all__ = [
    "RubricAspect",
    "UserDocument",
    "UserProfile",
    "TrainingInstance",
    "SyntheticWorldConfig",
    "DatasetParseError",
    "DatasetValidationError",
    "DEFAULT_SCHEMA",
    "load_dataset",
    "save_dataset",
    "dumps_instance",
    "generate_synthetic",
    "split",
]


class DatasetParseError(ValueError):
    """A JSONL line could not be decoded."""

    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class DatasetValidationError(ValueError):
    """A record decoded fine but breaks a data-model invariant."""

    def __init__(self, instance_id: str, message: str):
        super().__init__(f"instance {instance_id!r}: {message}")
        self.instance_id = instance_id


@dataclass(frozen=True)
class RubricAspect:
    id: str
    text: str
    keyphrases: tuple[str, ...] = ()


@dataclass(frozen=True)
class UserDocument:
    id: str
    text: str


@dataclass(frozen=True)
class UserProfile:
    user_id: str
    documents: tuple[UserDocument, ...]


@dataclass(frozen=True)
class TrainingInstance:
    id: str
    question: str
    narrative: str
    aspects: tuple[RubricAspect, ...]
    profile: UserProfile
    category: str | None = None

    def validate(self) -> None:
        if not self.question.strip():
            raise DatasetValidationError(self.id, "question is empty")
        if not self.aspects:
            raise DatasetValidationError(self.id, "aspects must be non-empty")
        for aspect in self.aspects:
            if not aspect.text.strip():
                raise DatasetValidationError(self.id, f"aspect {aspect.id!r} has empty text")
        docs = self.profile.documents
        if not docs:
            raise DatasetValidationError(self.id, "profile has no documents")
        seen: set[str] = set()
        for doc in docs:
            if not doc.text.strip():
                raise DatasetValidationError(self.id, f"document {doc.id!r} has empty text")
            if doc.id in seen:
                raise DatasetValidationError(self.id, f"duplicate document id {doc.id!r}")
            seen.add(doc.id)


# --------------------------------------------------------------------------- JSONL

_INSTANCE_KEYS = {"id", "question", "narrative", "aspects", "profile", "category"}
_ASPECT_KEYS = {"id", "text", "keyphrases"}
_PROFILE_KEYS = {"user_id", "documents"}
_DOC_KEYS = {"id", "text"}


def _warn_unknown(record: dict, known: set[str], where: str, line_number: int) -> None:
    extra = sorted(set(record) - known)
    if extra:
        logger.warning("line %d: ignoring unknown %s field(s): %s", line_number, where, ", ".join(extra))


def _require(record: dict, key: str, kind: type | tuple[type, ...], instance_id: str, where: str) -> Any:
    if key not in record:
        raise DatasetValidationError(instance_id, f"missing field {where}{key!r}")
    value = record[key]
    if not isinstance(value, kind):
        raise DatasetValidationError(instance_id, f"field {where}{key!r} has wrong type {type(value).__name__}")
    return value


def _instance_from_record(record: Any, line_number: int) -> TrainingInstance:
    if not isinstance(record, dict):
        raise DatasetParseError(line_number, "record is not a JSON object")
    instance_id = record.get("id")
    if not isinstance(instance_id, str):
        raise DatasetValidationError(f"<line {line_number}>", "missing or non-string 'id'")
    _warn_unknown(record, _INSTANCE_KEYS, "instance", line_number)

    question = _require(record, "question", str, instance_id, "")
    narrative = _require(record, "narrative", str, instance_id, "")
    raw_aspects = _require(record, "aspects", list, instance_id, "")
    raw_profile = _require(record, "profile", dict, instance_id, "")
    category = record.get("category")
    if category is not None and not isinstance(category, str):
        raise DatasetValidationError(instance_id, "field 'category' must be a string")

    aspects = []
    for raw in raw_aspects:
        if not isinstance(raw, dict):
            raise DatasetValidationError(instance_id, "aspect entry is not an object")
        _warn_unknown(raw, _ASPECT_KEYS, "aspect", line_number)
        keyphrases = raw.get("keyphrases", [])
        if not isinstance(keyphrases, list) or not all(isinstance(k, str) for k in keyphrases):
            raise DatasetValidationError(instance_id, "aspect 'keyphrases' must be a list of strings")
        aspects.append(
            RubricAspect(
                id=_require(raw, "id", str, instance_id, "aspects[]."),
                text=_require(raw, "text", str, instance_id, "aspects[]."),
                keyphrases=tuple(keyphrases),
            )
        )

    _warn_unknown(raw_profile, _PROFILE_KEYS, "profile", line_number)
    documents = []
    for raw in _require(raw_profile, "documents", list, instance_id, "profile."):
        if not isinstance(raw, dict):
            raise DatasetValidationError(instance_id, "document entry is not an object")
        _warn_unknown(raw, _DOC_KEYS, "document", line_number)
        documents.append(
            UserDocument(
                id=_require(raw, "id", str, instance_id, "profile.documents[]."),
                text=_require(raw, "text", str, instance_id, "profile.documents[]."),
            )
        )
    profile = UserProfile(
        user_id=_require(raw_profile, "user_id", str, instance_id, "profile."),
        documents=tuple(documents),
    )
    instance = TrainingInstance(
        id=instance_id,
        question=question,
        narrative=narrative,
        aspects=tuple(aspects),
        profile=profile,
        category=category,
    )
    instance.validate()
    return instance


def _instance_to_record(instance: TrainingInstance) -> dict:
    record: dict[str, Any] = {
        "id": instance.id,
        "question": instance.question,
        "narrative": instance.narrative,
        "aspects": [
            {"id": a.id, "text": a.text, "keyphrases": list(a.keyphrases)} for a in instance.aspects
        ],
        "profile": {
            "user_id": instance.profile.user_id,
            "documents": [{"id": d.id, "text": d.text} for d in instance.profile.documents],
        },
    }
    if instance.category is not None:
        record["category"] = instance.category
    return record


def dumps_instance(instance: TrainingInstance) -> str:
    """Canonical one-line JSON for an instance."""
    return json.dumps(_instance_to_record(instance), ensure_ascii=False, separators=(",", ":"))


def load_dataset(path: str | Path) -> list[TrainingInstance]:
    """Read a JSONL dataset; blank lines are skipped, order is preserved."""
    instances = []
    with open(path, encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetParseError(line_number, exc.msg) from exc
            instances.append(_instance_from_record(record, line_number))
    return instances


def save_dataset(instances: Iterable[TrainingInstance], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for instance in instances:
            fh.write(dumps_instance(instance))
            fh.write("\n")


# ------------------------------------------------------------------ synthetic world

DEFAULT_SCHEMA: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("occupation", ("nurse", "carpenter", "teacher", "programmer", "chef", "pilot")),
    ("diet", ("vegan", "keto", "pescatarian", "halal", "kosher", "vegetarian")),
    ("hobby", ("climbing", "painting", "chess", "gardening", "surfing", "knitting")),
    ("city", ("boston", "seattle", "denver", "austin", "chicago", "miami")),
    ("field", ("mathematics", "biology", "history", "chemistry", "linguistics", "economics")),
    ("pet", ("dog", "cat", "parrot", "rabbit", "hamster", "turtle")),
)

_ATTRIBUTE_DOC_TEMPLATES = (
    "Earlier I asked for advice and mentioned that my {attribute} is {value}.",
    "In a previous question I explained that my {attribute} is {value} these days.",
    "I once wrote that my {attribute} is {value} and asked what that implies.",
)
# Same wording pool as the attribute documents, minus the value.
_DISTRACTOR_TEMPLATES = (
    "Earlier I asked for advice on whether my {attribute} should matter at all.",
    "In a previous question I wondered how people usually describe their {attribute}.",
    "I once wrote a question about {attribute} choices in general.",
    "I asked which questions about {attribute} are common on forums.",
)
_QUESTION_TEMPLATES = (
    "What should I keep in mind when planning my next month, given my {attributes}?",
    "How would you adapt advice on staying healthy to my {attributes}?",
    "Can you suggest a weekend routine that suits my {attributes}?",
    "Which habits would help me most this year considering my {attributes}?",
)
_NARRATIVE_TEMPLATE = "I want the answer to take into account my {attributes}."
_ASPECT_TEMPLATE = "The response reflects the user's {attribute}."


def _template_vocabulary() -> set[str]:
    words: set[str] = set()
    for template in (
        *_ATTRIBUTE_DOC_TEMPLATES,
        *_DISTRACTOR_TEMPLATES,
        *_QUESTION_TEMPLATES,
        _NARRATIVE_TEMPLATE,
        _ASPECT_TEMPLATE,
    ):
        words.update(tokenize(template.replace("{attribute}", " ").replace("{attributes}", " ")))
    words.add("and")
    return words


@dataclass(frozen=True)
class SyntheticWorldConfig:
    num_users: int = 50
    attributes_per_user: int = 4
    attribute_schema: tuple[tuple[str, tuple[str, ...]], ...] = DEFAULT_SCHEMA
    distractor_docs_per_user: int = 3
    aspects_per_question: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_users < 1:
            raise ValueError("num_users must be positive")
        if self.attributes_per_user < 1:
            raise ValueError("attributes_per_user must be positive")
        if self.aspects_per_question < 1:
            raise ValueError("aspects_per_question must be positive")
        if self.distractor_docs_per_user < 0:
            raise ValueError("distractor_docs_per_user must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        names = [name for name, _ in self.attribute_schema]
        if len(set(names)) != len(names):
            raise ValueError("attribute names must be unique")
        if self.attributes_per_user > len(names):
            raise ValueError("attributes_per_user exceeds the schema size")
        if self.aspects_per_question > self.attributes_per_user:
            raise ValueError("aspects_per_question exceeds attributes_per_user")

        reserved = _template_vocabulary()
        reserved.update(tok for name in names for tok in tokenize(name))
        seen_values: set[str] = set()
        for name, values in self.attribute_schema:
            if not values:
                raise ValueError(f"attribute {name!r} has an empty value vocabulary")
            for value in values:
                tokens = tokenize(value)
                if not tokens:
                    raise ValueError(f"attribute {name!r} has a value without word tokens")
                clash = (set(tokens) & reserved) | (set(tokens) & seen_values)
                if clash:
                    raise ValueError(
                        f"value {value!r} of {name!r} reuses reserved or duplicate tokens {sorted(clash)}"
                    )
                seen_values.update(tokens)


def _join_attributes(names: Sequence[str]) -> str:
    if len(names) == 1:
        return names[0]
    return ", ".join(names[:-1]) + " and " + names[-1]


def generate_synthetic(config: SyntheticWorldConfig) -> list[TrainingInstance]:
    """One question per user; deterministic in ``config.seed``."""
    rng = random.Random(config.seed)
    schema = list(config.attribute_schema)
    all_names = [name for name, _ in schema]
    instances = []
    for u in range(config.num_users):
        user_id = f"u{u:04d}"
        chosen = sorted(rng.sample(range(len(schema)), config.attributes_per_user))
        assignment = {schema[i][0]: rng.choice(schema[i][1]) for i in chosen}

        texts = [
            rng.choice(_ATTRIBUTE_DOC_TEMPLATES).format(attribute=name, value=value)
            for name, value in assignment.items()
        ]
        for _ in range(config.distractor_docs_per_user):
            texts.append(rng.choice(_DISTRACTOR_TEMPLATES).format(attribute=rng.choice(all_names)))
        rng.shuffle(texts)
        documents = tuple(UserDocument(id=f"{user_id}-d{j}", text=t) for j, t in enumerate(texts))

        asked = rng.sample(list(assignment), config.aspects_per_question)
        joined = _join_attributes(asked)
        aspects = tuple(
            RubricAspect(
                id=name,
                text=_ASPECT_TEMPLATE.format(attribute=name),
                keyphrases=tuple(tokenize(assignment[name])),
            )
            for name in asked
        )
        instances.append(
            TrainingInstance(
                id=f"q{u:04d}",
                question=rng.choice(_QUESTION_TEMPLATES).format(attributes=joined),
                narrative=_NARRATIVE_TEMPLATE.format(attributes=joined),
                aspects=aspects,
                profile=UserProfile(user_id=user_id, documents=documents),
            )
        )
    return instances


def split(
    instances: Sequence[TrainingInstance], train_fraction: float, seed: int = 0
) -> tuple[list[TrainingInstance], list[TrainingInstance]]:
    """Shuffle then cut at ``floor(n * train_fraction)``, keeping at least one eval instance."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    n = len(instances)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    n_train = min(math.floor(n * train_fraction), n - 1)
    if n >= 2:
        n_train = max(n_train, 1)
    order = list(range(n))
    random.Random(seed).shuffle(order)
    train = [instances[i] for i in order[:n_train]]
    held_out = [instances[i] for i in order[n_train:]]
    return train, held_out
