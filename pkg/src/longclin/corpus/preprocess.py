"""Clinical note normalization."""
import re
import string

PLACEHOLDER = re.compile(r"\[\*\*.*?\*\*\]", re.DOTALL)
_KEEP = set(string.ascii_letters + string.digits + string.punctuation)
_SPACE = re.compile(r"\s+")


def preprocess_note(raw: str) -> str:
    """Strip de-identification placeholders and normalize a note.

    Steps, in order: drop ``[** ... **]`` placeholders, turn every character
    that is not an ASCII letter, digit or punctuation mark into a space,
    lowercase, collapse whitespace runs and trim.
    """
    text, prev = raw, None
    while text != prev:   # removal can expose a new placeholder: "[*[**a**]*b**]"
        prev, text = text, PLACEHOLDER.sub("", text)
    text = "".join(c if c in _KEEP else " " for c in text)
    text = text.lower()
    return _SPACE.sub(" ", text).strip()
