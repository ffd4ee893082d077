"""
Builders for small labeled datasets and scripted transcripts used across tests.
"""

import json
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path

import numpy as np

from nidslabel.data.dataset import LabeledDataset, LabeledRule
from nidslabel.rules.parser import SnortRule, parse_rule
from nidslabel.services.chat import ChatRequest

FIXTURES = Path(__file__).parent / "fixtures"

SMB_RULE = 'alert tcp $EXTERNAL_NET any -> $HOME_NET 445 (msg:"smb probe"; sid:1000001; rev:1;)'

# One indicator token per label; every rule carrying the label contains it
INDICATORS = {
    "T1046": "scanner",
    "T1059": "shellcmd",
    "T1105": "download",
    "T1110": "bruteforce",
    "T1190": "webexploit",
}
NOISE = ("alpha", "bravo", "charlie", "delta", "echo", "foxtrot")


def make_rule(sid: int, words: str = "probe") -> SnortRule:
    return parse_rule(f'alert tcp any any -> any any (msg:"{words}"; sid:{sid}; rev:1;)')


def make_dataset(labels: Mapping[int, Iterable[str]], words: str = "probe") -> LabeledDataset:
    """One rule per sid; the msg text is `words` for every rule."""
    return LabeledDataset(
        tuple(
            LabeledRule(sid=sid, rule=make_rule(sid, words), technique_ids=frozenset(ids))
            for sid, ids in labels.items()
        )
    )


def separable_dataset(n_rules: int = 200, seed: int = 3) -> LabeledDataset:
    """
    Rules whose labels are recoverable from indicator tokens alone.

    Rule i carries label i mod 5; every third rule also carries label
    (i + 2) mod 5. Each msg holds the indicators of its labels plus two noise
    words.
    """
    rng = np.random.default_rng(seed)
    labels = sorted(INDICATORS)
    items = []
    for i in range(n_rules):
        chosen = {labels[i % 5]}
        if i % 3 == 0:
            chosen.add(labels[(i + 2) % 5])
        noise = [NOISE[int(j)] for j in rng.choice(len(NOISE), size=2, replace=False)]
        words = " ".join([INDICATORS[t] for t in sorted(chosen)] + noise)
        sid = 2000000 + i
        rule = make_rule(sid, words)
        items.append(LabeledRule(sid=sid, rule=rule, technique_ids=frozenset(chosen)))
    return LabeledDataset(tuple(items))


def write_transcript(path: Path, replies: Sequence[str | None]) -> Path:
    """Transcript with one entry per reply; None marks a transport fault."""
    lines = []
    for ordinal, reply in enumerate(replies, start=1):
        entry: dict[str, object] = {"ordinal": ordinal}
        if reply is None:
            entry["fault"] = "transport"
        else:
            entry["reply"] = reply
        lines.append(json.dumps(entry))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def fingerprint_of(prompt_text: str, temperature: float = 0.0) -> str:
    return ChatRequest.user(prompt_text, temperature=temperature).fingerprint()
