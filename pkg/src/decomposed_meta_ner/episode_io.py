"""Episode and corpus file formats.

This module reads and writes the canonical episode format and normalizes the
two upstream benchmark layouts (Few-NERD episode-data and the Cross-Dataset
episodes) into it. It also reads and writes CoNLL-style corpora used by the
episode sampler.

Canonical format: UTF-8, one JSON record per line. The first record is a
header ``{"format_version": 1, "split_tag": ...}``; each following record is
``{"support": [{"tokens": [...], "tags": [...]}], "query": [...], "types": [...]}``
with flat per-token tags ("O" or a type name).
"""

import json
import logging
from enum import Enum
from pathlib import Path
from typing import (
    Any,
    Callable,
    Dict,
    Iterator,
    List,
    Optional,
    Sequence,
    Set,
    Tuple,
    Union,
)

from .episodes import (
    OUTSIDE_TAG,
    Episode,
    EpisodeSet,
    LabeledSequence,
    SplitTag,
    TypedSpan,
)
from .errors import DataError, EpisodeFormatError, EpisodeValidationError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1

PathLike = Union[str, Path]

# Field names assumed for the released Cross-Dataset episodes. Anything else
# found in a support/batch record is dropped with a warning.
CROSSDATASET_TOKENS_FIELD = "seq_ins"
CROSSDATASET_TAGS_FIELD = "seq_outs"
CROSSDATASET_SUPPORT_FIELD = "support"
CROSSDATASET_QUERY_FIELD = "batch"


class EpisodeFormat(str, Enum):
    """Supported episode file layouts."""

    CANONICAL = "canonical"
    FEWNERD = "fewnerd"
    CROSSDATASET = "crossdataset"


def load_episodes(
    path: PathLike,
    format: Union[str, EpisodeFormat] = EpisodeFormat.CANONICAL,
    split_tag: Optional[Union[str, SplitTag]] = None,
    strict: bool = True,
) -> EpisodeSet:
    """Load and validate an episode file.

    Args:
        path: Episode file
        format: File layout (canonical, fewnerd or crossdataset)
        split_tag: Split for formats without a header; guessed from the
            file name when omitted
        strict: Raise on validation errors instead of skipping the episode

    Returns:
        EpisodeSet: Validated episodes in file order

    Raises:
        EpisodeFormatError: A record cannot be parsed
        EpisodeValidationError: A record violates an episode invariant
            (strict mode only)
    """
    path = Path(path)
    episode_format = EpisodeFormat(format)
    if not path.exists():
        raise DataError(f"episode file not found: {path}")

    reader = _READERS[episode_format]
    warned: WarnedFields = set()
    episodes: List[Episode] = []
    header_split: Optional[SplitTag] = None
    skipped = 0

    for line_number, episode_id, record in reader(path, warned):
        if record is None:
            header_split = episode_id  # type: ignore[assignment]
            continue
        try:
            episodes.append(_episode_from_record(record, episode_id))
        except EpisodeValidationError as e:
            if strict:
                raise
            skipped += 1
            logger.warning(f"Skipping episode {episode_id} ({path}:{line_number}): {e}")

    split = header_split or _resolve_split(split_tag, path)
    logger.info(
        f"Loaded {len(episodes)} {split.value} episodes from {path} "
        f"(format={episode_format.value}, skipped={skipped})"
    )
    return EpisodeSet(tuple(episodes), split)


def save_episodes(episodes: EpisodeSet, path: PathLike) -> None:
    """Write an episode set in canonical format.

    Args:
        episodes: Episodes to write
        path: Output file, parent directories are created
    """
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as handle:
            handle.write(_dump_record(encode_header(episodes.split_tag)))
            for episode in episodes:
                handle.write(_dump_record(encode_episode(episode)))
    except OSError as e:
        raise DataError(f"cannot write episodes to {path}: {e}") from e
    logger.info(f"Saved {len(episodes)} episodes to {path}")


def encode_header(split_tag: SplitTag) -> Dict[str, Any]:
    """Header record of a canonical episode file."""
    return {"format_version": FORMAT_VERSION, "split_tag": SplitTag(split_tag).value}


def encode_episode(episode: Episode) -> Dict[str, Any]:
    """Canonical record for one episode."""
    return {
        "support": [_encode_sequence(sequence) for sequence in episode.support],
        "query": [_encode_sequence(sequence) for sequence in episode.query],
        "types": list(episode.types),
    }


def _encode_sequence(sequence: LabeledSequence) -> Dict[str, List[str]]:
    return {"tokens": list(sequence.tokens), "tags": sequence.tags}


def _dump_record(record: Dict[str, Any]) -> str:
    return json.dumps(record, ensure_ascii=False) + "\n"


# Readers yield (line number, episode id, record). A record of None marks a
# header, in which case the episode id slot carries the header's split tag.
RecordIterator = Iterator[Tuple[int, Any, Optional[Dict[str, Any]]]]

# (record kind, field) pairs already reported during one load.
WarnedFields = Set[Tuple[str, str]]


def _read_canonical(path: Path, warned: WarnedFields) -> RecordIterator:
    body_index = 0
    seen_header = False
    for line_number, record in _iter_json_lines(path):
        if not seen_header:
            seen_header = True
            version = record.get("format_version")
            if version != FORMAT_VERSION:
                raise EpisodeFormatError(
                    f"expected header with version {FORMAT_VERSION}, got {version!r}",
                    line=line_number,
                    field="format_version",
                )
            try:
                split = SplitTag(record.get("split_tag"))
            except ValueError:
                raise EpisodeFormatError(
                    f"unknown split tag {record.get('split_tag')!r}",
                    line=line_number,
                    field="split_tag",
                )
            yield line_number, split, None
            continue
        support = _parse_sequences(record, "support", line_number)
        query = _parse_sequences(record, "query", line_number)
        types = _require_string_list(record, "types", line_number)
        _warn_dropped(
            record, {"support", "query", "types"}, "canonical episode", warned
        )
        yield line_number, str(body_index), {
            "support": support,
            "query": query,
            "types": types,
        }
        body_index += 1


def _read_fewnerd(path: Path, warned: WarnedFields) -> RecordIterator:
    for index, (line_number, record) in enumerate(_iter_json_lines(path)):
        parsed = {}
        for part in ("support", "query"):
            section = record.get(part)
            if not isinstance(section, dict):
                raise EpisodeFormatError(
                    "missing or not an object", line=line_number, field=part
                )
            words = section.get("word")
            labels = section.get("label")
            if not isinstance(words, list) or not isinstance(labels, list):
                raise EpisodeFormatError(
                    "expected 'word' and 'label' lists",
                    line=line_number,
                    field=part,
                )
            _warn_dropped(section, {"word", "label"}, f"fewnerd {part}", warned)
            pairs = _zip_strict(words, labels, line_number, part)
            parsed[part] = [
                _parse_tagged(tokens, tags, line_number, f"{part}[{i}]")
                for i, (tokens, tags) in enumerate(pairs)
            ]
        parsed["types"] = _require_string_list(record, "types", line_number)
        _warn_dropped(
            record, {"support", "query", "types"}, "fewnerd episode", warned
        )
        yield line_number, str(index), parsed


def _read_crossdataset(path: Path, warned: WarnedFields) -> RecordIterator:
    try:
        with path.open("r", encoding="utf-8") as handle:
            document = json.load(handle)
    except json.JSONDecodeError as e:
        raise EpisodeFormatError(e.msg, line=e.lineno, field="json") from e
    if not isinstance(document, dict):
        raise EpisodeFormatError("expected an object keyed by domain name", line=1)
    for domain, domain_episodes in document.items():
        if not isinstance(domain_episodes, list):
            raise EpisodeFormatError(
                "expected a list of episodes", field=f"{domain}"
            )
        for index, record in enumerate(domain_episodes):
            parsed = {}
            for part, source in (
                ("support", CROSSDATASET_SUPPORT_FIELD),
                ("query", CROSSDATASET_QUERY_FIELD),
            ):
                where = f"{domain}[{index}].{source}"
                section = record.get(source) if isinstance(record, dict) else None
                if not isinstance(section, dict):
                    raise EpisodeFormatError("missing or not an object", field=where)
                tokens_list = section.get(CROSSDATASET_TOKENS_FIELD)
                tags_list = section.get(CROSSDATASET_TAGS_FIELD)
                if not isinstance(tokens_list, list) or not isinstance(tags_list, list):
                    raise EpisodeFormatError(
                        f"expected '{CROSSDATASET_TOKENS_FIELD}' and "
                        f"'{CROSSDATASET_TAGS_FIELD}' lists",
                        field=where,
                    )
                _warn_dropped(
                    section,
                    {CROSSDATASET_TOKENS_FIELD, CROSSDATASET_TAGS_FIELD},
                    "crossdataset",
                    warned,
                )
                parsed[part] = [
                    _parse_bio(tokens, tags, f"{where}[{i}]")
                    for i, (tokens, tags) in enumerate(
                        _zip_strict(tokens_list, tags_list, None, where)
                    )
                ]
            types: List[str] = []
            for sequence in parsed["support"] + parsed["query"]:
                for entity_type in sequence.entity_types:
                    if entity_type not in types:
                        types.append(entity_type)
            parsed["types"] = sorted(types)
            yield 0, f"{domain}-{index}", parsed


_READERS: Dict[EpisodeFormat, Callable[[Path, WarnedFields], RecordIterator]] = {
    EpisodeFormat.CANONICAL: _read_canonical,
    EpisodeFormat.FEWNERD: _read_fewnerd,
    EpisodeFormat.CROSSDATASET: _read_crossdataset,
}

def _warn_dropped(
    record: Dict[str, Any], known: set, where: str, warned: WarnedFields
) -> None:
    """Warn once per load about each unknown field of a record kind."""
    for key in record:
        if key not in known and (where, key) not in warned:
            warned.add((where, key))
            logger.warning(f"Dropping field '{key}' from {where} records")


def _iter_json_lines(path: Path) -> Iterator[Tuple[int, Dict[str, Any]]]:
    with path.open("r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise EpisodeFormatError(
                    f"invalid JSON ({e.msg})", line=line_number, field="json"
                ) from e
            if not isinstance(record, dict):
                raise EpisodeFormatError("expected a JSON object", line=line_number)
            yield line_number, record


def _require_string_list(record: Dict[str, Any], key: str, line: int) -> List[str]:
    value = record.get(key)
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise EpisodeFormatError("expected a list of strings", line=line, field=key)
    return list(value)


def _zip_strict(first: list, second: list, line: Optional[int], field: str):
    if len(first) != len(second):
        raise EpisodeFormatError(
            f"{len(first)} token lists but {len(second)} tag lists",
            line=line,
            field=field,
        )
    return zip(first, second)


def _parse_sequences(
    record: Dict[str, Any], key: str, line: int
) -> List[LabeledSequence]:
    value = record.get(key)
    if not isinstance(value, list):
        raise EpisodeFormatError("expected a list of sentences", line=line, field=key)
    sequences = []
    for index, item in enumerate(value):
        where = f"{key}[{index}]"
        if not isinstance(item, dict):
            raise EpisodeFormatError(
                "expected a sentence object", line=line, field=where
            )
        tokens, tags = item.get("tokens"), item.get("tags")
        sequences.append(_parse_tagged(tokens, tags, line, where))
    return sequences


def _parse_tagged(
    tokens: Any, tags: Any, line: Optional[int], where: str
) -> LabeledSequence:
    if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
        raise EpisodeFormatError(
            "expected a list of token strings", line=line, field=f"{where}.tokens"
        )
    if not isinstance(tags, list) or not all(isinstance(t, str) for t in tags):
        raise EpisodeFormatError(
            "expected a list of tag strings", line=line, field=f"{where}.tags"
        )
    if len(tokens) != len(tags):
        raise EpisodeFormatError(
            f"{len(tokens)} tokens but {len(tags)} tags",
            line=line,
            field=f"{where}.tags",
        )
    if not tokens:
        raise EpisodeFormatError("empty sentence", line=line, field=f"{where}.tokens")
    return LabeledSequence.from_tags(tokens, tags)


def _parse_bio(tokens: Any, tags: Any, where: str) -> LabeledSequence:
    """Cross-Dataset sentences carry BIO tags such as B-PER / I-PER / O."""
    if not isinstance(tokens, list) or not isinstance(tags, list):
        raise EpisodeFormatError("expected token and tag lists", field=where)
    if len(tokens) != len(tags):
        raise EpisodeFormatError("token and tag lists differ", field=where)
    if not tokens:
        raise EpisodeFormatError("empty sentence", field=where)
    return LabeledSequence(tuple(tokens), tuple(spans_from_bio(tags)))


def spans_from_bio(tags: Sequence[str]) -> List[TypedSpan]:
    """Spans from BIO tags; an I- continuing a different type opens a new span."""
    spans: List[TypedSpan] = []
    start: Optional[int] = None
    current: Optional[str] = None
    for index, tag in enumerate(list(tags) + [OUTSIDE_TAG]):
        prefix, _, entity_type = tag.partition("-")
        continues = prefix == "I" and entity_type == current
        if current is not None and not continues:
            spans.append(TypedSpan(start, index - 1, current))
            start, current = None, None
        if prefix in ("B", "I") and entity_type and not continues:
            start, current = index, entity_type
    return spans


def _episode_from_record(record: Dict[str, Any], episode_id: str) -> Episode:
    return Episode(
        support=tuple(record["support"]),
        query=tuple(record["query"]),
        types=tuple(record["types"]),
        episode_id=episode_id,
    )


def _resolve_split(split_tag: Optional[Union[str, SplitTag]], path: Path) -> SplitTag:
    if split_tag is not None:
        return SplitTag(split_tag)
    name = path.name.lower()
    for candidate in (SplitTag.TRAIN, SplitTag.DEV, SplitTag.TEST):
        if candidate.value in name:
            return candidate
    if "valid" in name:
        return SplitTag.DEV
    return SplitTag.TEST


def load_corpus(path: PathLike) -> List[LabeledSequence]:
    """Read a CoNLL-style corpus of ``token<TAB>tag`` lines.

    Sentences are separated by blank lines; tags are flat type names or "O".

    Args:
        path: Corpus file

    Returns:
        list: One LabeledSequence per sentence
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"corpus file not found: {path}")
    sentences: List[LabeledSequence] = []
    tokens: List[str] = []
    tags: List[str] = []

    def flush(line_number: int) -> None:
        if tokens:
            try:
                sentences.append(LabeledSequence.from_tags(tokens, tags))
            except EpisodeValidationError as e:
                raise EpisodeFormatError(str(e), line=line_number, field="tag") from e
            tokens.clear()
            tags.clear()

    with path.open("r", encoding="utf-8") as handle:
        line_number = 0
        for line_number, line in enumerate(handle, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                flush(line_number)
                continue
            columns = line.split("\t")
            if len(columns) != 2 or not columns[0] or not columns[1]:
                raise EpisodeFormatError(
                    "expected 'token<TAB>tag'", line=line_number, field="columns"
                )
            tokens.append(columns[0])
            tags.append(columns[1])
        flush(line_number)
    logger.info(f"Loaded corpus of {len(sentences)} sentences from {path}")
    return sentences


def save_corpus(sentences: Sequence[LabeledSequence], path: PathLike) -> None:
    """Write sentences in the CoNLL-style format read by load_corpus."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as handle:
            for sentence in sentences:
                for token, tag in zip(sentence.tokens, sentence.tags):
                    handle.write(f"{token}\t{tag}\n")
                handle.write("\n")
    except OSError as e:
        raise DataError(f"cannot write corpus to {path}: {e}") from e
    logger.info(f"Saved corpus of {len(sentences)} sentences to {path}")
