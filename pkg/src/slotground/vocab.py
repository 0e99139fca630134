"""Category vocabularies shared by data generation, the report policy and rewards."""

DEFECT_TYPES = ("scratch", "dent", "contamination", "missing-part")
NONE_TYPE = "None"
TYPE_VOCAB = DEFECT_TYPES + (NONE_TYPE,)

ROWS = ("upper", "center", "lower")
COLS = ("left", "center", "right")
QUALIFIERS = ("edge", "surface", "corner")

# valid confidence bins plus one out-of-range bin a malformed decoder can emit
CONF_BINS = tuple(round(0.1 * i, 1) for i in range(1, 11)) + (1.5,)
N_CELLS = 9


def cell_qualifier(row: int, col: int) -> str:
    if row == 1 and col == 1:
        return "surface"
    if row != 1 and col != 1:
        return "corner"
    return "edge"
