"""Edit / equivalent / unrelated tuples: a synthetic fact family and a JSONL loader.

Synthetic facts map ``(subject, relation)`` to an object. A subject is a
pair of subject tokens, a relation has several synonym tokens, and a prompt
is a frame that orders the subject, relation and filler slots and ends in
``?``. Paraphrases change the frame order, the relation synonym and the
fillers, so an edit made through one prompt has to carry over to prompts
that share no surface form with it beyond the subject.
"""
import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError
from .lm import Batch

SPLITS = ("train", "val")
FORMATS = ("qa-jsonl", "fc-jsonl")


@dataclass(frozen=True)
class EditTuple:
    prompt: tuple
    answer: tuple

    def __post_init__(self):
        object.__setattr__(self, "prompt", tuple(int(t) for t in self.prompt))
        object.__setattr__(self, "answer", tuple(int(t) for t in self.answer))
        if not self.prompt:
            raise ValueError("prompt must be nonempty")
        if not self.answer:
            raise ValueError("answer must be nonempty")

    def to_json(self):
        return [list(self.prompt), list(self.answer)]


@dataclass
class EditTask:
    """Edits with their equivalent sets and an unrelated pool.

    ``pretrain`` lists tuples a base model should know before editing (the
    unrelated facts in every phrasing, plus the pre-edit answers of the
    edited facts when labels are flipped).
    """
    edits: list
    equivalents: list
    unrelated_pool: list
    vocab_size: int
    splits: list
    pretrain: list = field(default_factory=list)
    token_names: list = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.equivalents) != len(self.edits) or len(self.splits) != len(self.edits):
            raise ValueError("edits, equivalents and split tags must align")
        for eq in self.equivalents:
            if not eq:
                raise ValueError("every edit needs at least one equivalent")
        for s in self.splits:
            if s not in SPLITS:
                raise ValueError(f"unknown split tag {s!r}")
        for t in itertools.chain(self.edits, *self.equivalents, self.unrelated_pool, self.pretrain):
            if max(t.prompt + t.answer) >= self.vocab_size or min(t.prompt + t.answer) < 0:
                raise ValueError("token id outside the vocabulary")
        edited = {t.prompt for t in self.edits} | {t.prompt for eq in self.equivalents for t in eq}
        if any(t.prompt in edited for t in self.unrelated_pool):
            raise ValueError("an unrelated tuple shares a prompt with an edit or equivalent")

    def __len__(self):
        return len(self.edits)

    def indices(self, split=None):
        if split is None:
            return list(range(len(self.edits)))
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return [i for i, s in enumerate(self.splits) if s == split]

    def max_len(self):
        """Longest model input (prompt plus answer minus one) over every tuple."""
        tuples = itertools.chain(self.edits, *self.equivalents, self.unrelated_pool, self.pretrain)
        return max((len(t.prompt) + len(t.answer) - 1 for t in tuples), default=1)

    def detokenize(self, ids):
        if self.token_names is None:
            raise ValueError("task carries no token names")
        return " ".join(self.token_names[i] for i in ids)

    # ----------------------------------------------------------------- io
    def to_json(self):
        return {
            "vocab_size": self.vocab_size,
            "edits": [t.to_json() for t in self.edits],
            "equivalents": [[t.to_json() for t in eq] for eq in self.equivalents],
            "unrelated_pool": [t.to_json() for t in self.unrelated_pool],
            "pretrain": [t.to_json() for t in self.pretrain],
            "splits": list(self.splits),
            "token_names": self.token_names,
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, obj):
        tup = lambda pa: EditTuple(pa[0], pa[1])  # noqa: E731
        return cls(
            edits=[tup(t) for t in obj["edits"]],
            equivalents=[[tup(t) for t in eq] for eq in obj["equivalents"]],
            unrelated_pool=[tup(t) for t in obj["unrelated_pool"]],
            vocab_size=obj["vocab_size"],
            splits=list(obj["splits"]),
            pretrain=[tup(t) for t in obj.get("pretrain", [])],
            token_names=obj.get("token_names"),
            meta=obj.get("meta", {}),
        )

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f, sort_keys=True, separators=(",", ":"))
            f.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_json(json.load(f))


# ----------------------------------------------------------- synthetic family

@dataclass(frozen=True)
class _Layout:
    fillers: tuple
    relations: tuple  # relations[r] = synonym token ids
    subject_parts: tuple
    objects: tuple
    names: tuple


def _layout(vocab_size, n_relations, n_synonyms, n_fillers, n_objects):
    names = ["<pad>", "?"]
    def take(prefix, count):
        start = len(names)
        names.extend(f"{prefix}{i}" for i in range(count))
        return tuple(range(start, start + count))
    fillers = take("f", n_fillers)
    relations = tuple(take(f"r{r}~", n_synonyms) for r in range(n_relations))
    objects = take("o", n_objects)
    n_parts = vocab_size - len(names)
    if n_parts < 2:
        raise ValueError(f"vocab_size {vocab_size} leaves no room for subject tokens")
    parts = take("s", n_parts)
    return _Layout(fillers, relations, parts, objects, tuple(names))


def _render(layout, subject, relation, synonym, fillers, order):
    slots = {"S": list(subject), "R": [layout.relations[relation][synonym]], "F": list(fillers)}
    return tuple(tok for slot in order for tok in slots[slot]) + (1,)


_ORDERS = tuple(itertools.permutations("SRF"))


def generate_synthetic_task(seed, num_facts, vocab_size, prompt_len, paraphrases_per_fact, *,
                            num_unrelated=None, answer_len=1, n_relations=4, n_synonyms=3,
                            n_objects=None, flip_labels=True, val_fraction=0.25, unrelated_phrasings=None):
    """Deterministic synthetic fact-editing task.

    ``flip_labels=True`` gives every edited fact a pre-edit answer (in
    ``pretrain``) and asks the edit for a different one; with ``False`` the
    edited facts are simply new to the model. The unrelated pool uses
    subjects that never occur in an edit. ``unrelated_phrasings`` caps how
    many phrasings of each unrelated fact enter the pool (default: all).
    """
    if paraphrases_per_fact < 1:
        raise ValueError("paraphrases_per_fact must be >= 1")
    if num_facts < 1:
        raise ValueError("num_facts must be >= 1")
    if prompt_len < 4:
        raise ValueError("prompt_len must be >= 4 (two subject tokens, a relation and '?')")
    if answer_len < 1:
        raise ValueError("answer_len must be >= 1")
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError("val_fraction must lie in [0, 1)")
    num_unrelated = num_facts if num_unrelated is None else num_unrelated
    n_fill_slots = prompt_len - 4
    n_fillers = max(2, n_fill_slots + 2) if n_fill_slots else 0
    n_objects = n_objects or max(4, min(32, (vocab_size - 2 - n_fillers - n_relations * n_synonyms) // 3))
    layout = _layout(vocab_size, n_relations, n_synonyms, n_fillers, n_objects)

    # distinct phrasings per fact: frame order x synonym x filler choice
    orders = _ORDERS if n_fill_slots else tuple(o for o in _ORDERS if o.index("F") == 2)
    n_filler_sets = len(layout.fillers) ** n_fill_slots if n_fill_slots else 1
    n_phrasings = len(orders) * n_synonyms * n_filler_sets
    if paraphrases_per_fact + 1 > n_phrasings:
        raise ValueError(f"only {n_phrasings} distinct phrasings available for {paraphrases_per_fact} paraphrases")

    parts = layout.subject_parts
    n_pairs = len(parts) * (len(parts) - 1) * n_relations
    if num_facts + num_unrelated > n_pairs:
        raise ValueError(f"vocabulary supports {n_pairs} facts, {num_facts + num_unrelated} requested")

    rng = np.random.default_rng(seed)
    subjects = [(a, b) for a in parts for b in parts if a != b]
    perm = rng.permutation(len(subjects))
    # edit and unrelated facts come from disjoint subject sets
    n_edit_subj = -(-num_facts // n_relations)
    n_unrel_subj = -(-num_unrelated // n_relations)
    if n_edit_subj + n_unrel_subj > len(subjects):
        raise ValueError("not enough subjects for disjoint edit and unrelated facts")
    edit_subjects = [subjects[i] for i in perm[:n_edit_subj]]
    unrel_subjects = [subjects[i] for i in perm[n_edit_subj:n_edit_subj + n_unrel_subj]]

    def facts_for(subj_list, count):
        pairs = [(s, r) for s in subj_list for r in range(n_relations)]
        pick = rng.permutation(len(pairs))[:count]
        return [pairs[i] for i in sorted(pick)]

    edit_facts = facts_for(edit_subjects, num_facts)
    unrel_facts = facts_for(unrel_subjects, num_unrelated)

    def draw_answer(r, avoid=None):
        while True:
            ans = tuple(int(layout.objects[i]) for i in r.integers(0, len(layout.objects), answer_len))
            if ans != avoid:
                return ans

    def phrasings(r, subject, relation, count):
        """``count`` distinct prompts; the first uses the canonical frame."""
        seen = []
        canonical = _render(layout, subject, relation, 0, layout.fillers[:n_fill_slots], orders[0])
        seen.append(canonical)
        while len(seen) < count:
            order = orders[int(r.integers(len(orders)))]
            syn = int(r.integers(n_synonyms))
            fill = tuple(int(layout.fillers[i]) for i in r.integers(0, max(len(layout.fillers), 1), n_fill_slots)) \
                if n_fill_slots else ()
            p = _render(layout, subject, relation, syn, fill, order)
            if p not in seen:
                seen.append(p)
        return seen

    edits, equivalents, pretrain = [], [], []
    for i, (subject, relation) in enumerate(edit_facts):
        r = np.random.default_rng([seed, 1, i])
        prompts = phrasings(r, subject, relation, paraphrases_per_fact + 1)
        old = draw_answer(r)
        new = draw_answer(r, avoid=old) if flip_labels else old
        edits.append(EditTuple(prompts[0], new))
        equivalents.append([EditTuple(p, new) for p in prompts[1:]])
        if flip_labels:
            pretrain.extend(EditTuple(p, old) for p in prompts)

    n_unrel_phr = paraphrases_per_fact + 1 if unrelated_phrasings is None else unrelated_phrasings
    unrelated = []
    for i, (subject, relation) in enumerate(unrel_facts):
        r = np.random.default_rng([seed, 2, i])
        prompts = phrasings(r, subject, relation, paraphrases_per_fact + 1)
        ans = draw_answer(r)
        tuples = [EditTuple(p, ans) for p in prompts]
        pretrain.extend(tuples)
        unrelated.extend(tuples[:n_unrel_phr])

    n_val = int(round(val_fraction * num_facts))
    val = set(rng.permutation(num_facts)[:n_val].tolist())
    splits = ["val" if i in val else "train" for i in range(num_facts)]
    meta = {
        "generator": "synthetic", "seed": int(seed), "num_facts": int(num_facts), "vocab_size": int(vocab_size),
        "prompt_len": int(prompt_len), "paraphrases_per_fact": int(paraphrases_per_fact),
        "answer_len": int(answer_len), "flip_labels": bool(flip_labels), "num_unrelated": int(num_unrelated),
    }
    return EditTask(edits, equivalents, unrelated, vocab_size, splits, pretrain, list(layout.names), meta)


# ---------------------------------------------------------------- vocabulary

class Vocabulary:
    """Whitespace (``mode="word"``) or character (``mode="char"``) tokenizer.

    Ids 0 and 1 are reserved for ``<pad>`` and ``<unk>``.
    """
    PAD, UNK = "<pad>", "<unk>"

    def __init__(self, tokens, mode="word"):
        if mode not in ("word", "char"):
            raise ValueError(f"unknown tokenizer mode {mode!r}")
        self.mode = mode
        self.tokens = [self.PAD, self.UNK] + [t for t in tokens if t not in (self.PAD, self.UNK)]
        self.index = {}
        for i, t in enumerate(self.tokens):
            self.index.setdefault(t, i)

    def __len__(self):
        return len(self.tokens)

    def split(self, text):
        return text.split(" ") if self.mode == "word" else list(text)

    def tokenize(self, text):
        return tuple(self.index.get(t, 1) for t in self.split(text))

    def detokenize(self, ids):
        sep = " " if self.mode == "word" else ""
        return sep.join(self.tokens[i] for i in ids)

    @classmethod
    def build(cls, texts, mode="word"):
        seen = {}
        for text in texts:
            for t in (text.split(" ") if mode == "word" else list(text)):
                seen.setdefault(t, None)
        return cls(list(seen), mode)

    @classmethod
    def load(cls, path, mode="word"):
        with open(path, encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f if line.rstrip("\n")], mode)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for t in self.tokens:
                f.write(t + "\n")


def _parse_records(path, fmt):
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: invalid JSON ({exc.msg})", line=lineno) from None
            if not isinstance(rec, dict):
                raise ParseError(f"{path}: record is not an object", line=lineno)
            need = ("prompt", "answer", "equivalents") + (("label",) if fmt == "fc-jsonl" else ())
            for key in need:
                if key not in rec:
                    raise ParseError(f"{path}: missing field {key!r}", line=lineno)
            if not isinstance(rec["prompt"], str) or not rec["prompt"]:
                raise ParseError(f"{path}: prompt must be a nonempty string", line=lineno)
            # fact-checking answers come from the label, so only the type is checked there
            if not isinstance(rec["answer"], str) or not (rec["answer"] or fmt == "fc-jsonl"):
                raise ParseError(f"{path}: answer must be a nonempty string", line=lineno)
            eq = rec["equivalents"]
            if not isinstance(eq, list) or not eq or not all(isinstance(e, str) and e for e in eq):
                raise ParseError(f"{path}: equivalents must be a nonempty list of strings", line=lineno)
            if fmt == "fc-jsonl" and rec["label"] not in (True, False, 0, 1):
                raise ParseError(f"{path}: label must be binary", line=lineno)
            unrel = rec.get("unrelated", [])
            if not isinstance(unrel, list) or not all(
                    isinstance(u, dict) and isinstance(u.get("prompt"), str) and isinstance(u.get("answer"), str)
                    and u["prompt"] and u["answer"] for u in unrel):
                raise ParseError(f"{path}: unrelated must be a list of prompt/answer objects", line=lineno)
            split = rec.get("split", "train")
            if split not in SPLITS:
                raise ParseError(f"{path}: unknown split {split!r}", line=lineno)
            records.append(rec)
    return records


def load_dataset(path, format, vocab=None, *, mode="word"):
    """Read a ``qa-jsonl`` or ``fc-jsonl`` file into an :class:`EditTask`.

    Each line holds ``prompt``, ``answer`` and ``equivalents`` (plus a
    binary ``label`` for ``fc-jsonl``, whose answer is then the token
    ``True`` or ``False``). Optional fields: ``unrelated`` (a list of
    ``{"prompt", "answer"}``) and ``split``. Without ``vocab`` one is built
    from the file. Returns ``(task, vocab)``.
    """
    if format not in FORMATS:
        raise ValueError(f"unknown dataset format {format!r}; choose from {FORMATS}")
    records = _parse_records(path, format)
    fc = format == "fc-jsonl"
    answer_of = (lambda rec: "True" if rec["label"] else "False") if fc else (lambda rec: rec["answer"])
    if vocab is None:
        texts = []
        if fc:
            texts += ["True", "False"]
        for rec in records:
            texts += [rec["prompt"], answer_of(rec), *rec["equivalents"]]
            texts += [t for u in rec.get("unrelated", []) for t in (u["prompt"], u["answer"])]
        vocab = Vocabulary.build(texts, mode)
    edits, equivalents, splits, unrelated = [], [], [], []
    for rec in records:
        ans = vocab.tokenize(answer_of(rec))
        edits.append(EditTuple(vocab.tokenize(rec["prompt"]), ans))
        equivalents.append([EditTuple(vocab.tokenize(e), ans) for e in rec["equivalents"]])
        splits.append(rec.get("split", "train"))
        unrelated += [EditTuple(vocab.tokenize(u["prompt"]), vocab.tokenize(u["answer"]))
                      for u in rec.get("unrelated", [])]
    edited = {t.prompt for t in edits} | {t.prompt for eq in equivalents for t in eq}
    kept = [t for t in unrelated if t.prompt not in edited]
    meta = {"generator": format, "records": len(records), "unrelated_dropped": len(unrelated) - len(kept)}
    task = EditTask(edits, equivalents, kept, len(vocab), splits, list(kept), list(vocab.tokens), meta)
    return task, vocab


# ------------------------------------------------------------------ sampling

@dataclass(frozen=True)
class EditSample:
    """Indices behind one sampled batch of aligned triples."""
    edits: tuple
    equivalents: tuple  # (edit index, equivalent index)
    unrelated: tuple


def sample_indices(task, m, seed, split=None):
    pool = task.indices(split)
    if m < 1:
        raise ValueError("m must be >= 1")
    if m > len(pool):
        raise ValueError(f"cannot sample {m} edits from {len(pool)}")
    if not task.unrelated_pool:
        raise ValueError("task has no unrelated tuples")
    rng = np.random.default_rng(seed)
    chosen = tuple(int(pool[i]) for i in rng.permutation(len(pool))[:m])
    equiv = tuple((i, int(rng.integers(len(task.equivalents[i])))) for i in chosen)
    n_pool = len(task.unrelated_pool)
    unrel = rng.permutation(n_pool)[:m] if m <= n_pool else rng.integers(0, n_pool, m)
    return EditSample(chosen, equiv, tuple(int(u) for u in unrel))


def sample_edit_batch(task, m, seed, split=None):
    """``m`` aligned (edit, equivalent, unrelated) triples as three batches."""
    s = sample_indices(task, m, seed, split)
    return (
        Batch.from_tuples(task.edits[i] for i in s.edits),
        Batch.from_tuples(task.equivalents[i][k] for i, k in s.equivalents),
        Batch.from_tuples(task.unrelated_pool[u] for u in s.unrelated),
    )


@dataclass(frozen=True)
class EvalSplit:
    """Tuples scored for ES, GS and LS."""
    edits: Batch
    equivalents: Batch
    unrelated: Batch


def eval_split(task, m, seed, split=None, n_unrelated=None):
    """Edits sampled as in :func:`sample_edit_batch`, all of their equivalents, and an unrelated sample."""
    s = sample_indices(task, m, seed, split)
    equiv = [t for i in s.edits for t in task.equivalents[i]]
    rng = np.random.default_rng([seed, 7])
    k = min(n_unrelated or len(task.unrelated_pool), len(task.unrelated_pool))
    unrel = [task.unrelated_pool[u] for u in sorted(rng.permutation(len(task.unrelated_pool))[:k])]
    return s, EvalSplit(Batch.from_tuples(task.edits[i] for i in s.edits), Batch.from_tuples(equiv),
                        Batch.from_tuples(unrel))


def fit_base_model_for_task(task, *, width=32, hidden=128, n_blocks=3, epochs=60, lr=1e-2, batch_size=64,
                            seed=0, nonlinearity="gelu", editable_policy="second-fc-last-k", last_k=6):
    """Pretrain a fresh editable model on ``task.pretrain``."""
    from . import lm

    model = lm.init_model(task.vocab_size, width, hidden, n_blocks, task.max_len(), nonlinearity=nonlinearity,
                          seed=seed, editable_policy=editable_policy, last_k=last_k)
    if not task.pretrain:
        return model
    return lm.fit_base_model(model, Batch.from_tuples(task.pretrain), epochs=epochs, lr=lr,
                             batch_size=batch_size, seed=seed)
