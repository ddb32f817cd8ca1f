"""Class vocabulary shared by every module."""

CLASS_NAMES = ("CD3", "CD8_CD3LO", "CD8_CD3HI", "CD20", "Other")
NUM_CLASSES = len(CLASS_NAMES)
CD3, CD8_CD3LO, CD8_CD3HI, CD20, OTHER = range(NUM_CLASSES)

# Classes other than background/other, in vocabulary order.
POSITIVE_CLASSES = (CD3, CD8_CD3LO, CD8_CD3HI, CD20)


def class_index(name: str) -> int:
    try:
        return CLASS_NAMES.index(name)
    except ValueError:
        raise ValueError(f"unknown class {name!r}; expected one of {CLASS_NAMES}") from None
