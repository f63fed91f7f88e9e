"""Decision-relevant concept selection for tabular MDPs."""

from drselect.concepts import ConceptBank, ConceptSubset, NoiseSpec
from drselect.errors import InfeasibleError, OracleBudgetError, ValidationError
from drselect.mdp import PolicyTable, QTable, TabularMdp
from drselect.selection import SelectionInstance, SelectionResult, select_drs, select_drs_log

__all__ = [
    "ConceptBank",
    "ConceptSubset",
    "InfeasibleError",
    "NoiseSpec",
    "OracleBudgetError",
    "PolicyTable",
    "QTable",
    "SelectionInstance",
    "SelectionResult",
    "TabularMdp",
    "ValidationError",
    "select_drs",
    "select_drs_log",
]

__version__ = "0.1.0"
