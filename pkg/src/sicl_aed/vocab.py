"""Character vocabulary shared by the data generator, model and decoders."""
from __future__ import annotations

import string

PAD, SOS, EOU, UNK = "<pad>", "<sos>", "<eou>", "<unk>"
SYMBOLS: tuple[str, ...] = (PAD, SOS, EOU, UNK) + tuple(string.ascii_lowercase) + (" ",)

PAD_ID, SOS_ID, EOU_ID, UNK_ID = 0, 1, 2, 3
VOCAB_SIZE = len(SYMBOLS)
# The CTC head has one extra output class for the blank.
BLANK_ID = VOCAB_SIZE
CTC_CLASSES = VOCAB_SIZE + 1

_INDEX = {s: i for i, s in enumerate(SYMBOLS)}


def encode_text(text: str) -> list[int]:
    return [_INDEX.get(ch, UNK_ID) for ch in text]


def decode_ids(ids) -> str:
    out = []
    for i in ids:
        i = int(i)
        if i >= 4 and i < VOCAB_SIZE:
            out.append(SYMBOLS[i])
    return "".join(out)


def letter_id(ch: str) -> int:
    return _INDEX[ch]
