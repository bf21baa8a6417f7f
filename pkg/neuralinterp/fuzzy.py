"""
Fuzzy Boolean regression tasks.

Product fuzzy logic relaxes Boolean operators to [0, 1]: and(a, b) = a*b,
not(a) = 1 - a, or(a, b) = 1 - (1 - a)(1 - b). A random task samples a
truth table over N variables, builds its sum-of-products expression from the
minterms and evaluates that expression on uniform inputs.
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.metrics import r2_score as sklearn_r2_score
from sklearn.model_selection import train_test_split

logger = logging.getLogger(__name__)

VALIDATION_FRACTION = 0.2
MIN_SAMPLES = 10


class FuzzyError(Exception):
    """Raised when fuzzy logic inputs or datasets are invalid."""
    pass


def _check_unit_interval(name: str, value: np.ndarray | float) -> np.ndarray:
    array = np.asarray(value, dtype=np.float64)
    if np.any(array < 0.0) or np.any(array > 1.0) or np.any(np.isnan(array)):
        raise FuzzyError(f"{name} expects values in [0, 1]")
    return array


def fuzzy_and(a: np.ndarray | float, b: np.ndarray | float) -> np.ndarray:
    """Product t-norm a * b."""
    return _check_unit_interval("and", a) * _check_unit_interval("and", b)


def fuzzy_not(a: np.ndarray | float) -> np.ndarray:
    """Complement 1 - a."""
    return 1.0 - _check_unit_interval("not", a)


def fuzzy_or(a: np.ndarray | float, b: np.ndarray | float) -> np.ndarray:
    """De Morgan dual of and: 1 - (1 - a)(1 - b)."""
    return fuzzy_not(fuzzy_and(fuzzy_not(a), fuzzy_not(b)))


@dataclass(frozen=True)
class FuzzyExpr:
    """
    Fuzzy Boolean function of N variables given by its truth table.

    Entry i of the table is the value at the Boolean assignment whose binary
    encoding is i, variable 0 being the most significant bit.
    """
    n_vars: int
    truth_table: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.n_vars < 1:
            raise FuzzyError(f"Need at least one variable, got {self.n_vars}")
        if len(self.truth_table) != 2 ** self.n_vars:
            raise FuzzyError(
                f"Truth table of {self.n_vars} variables needs {2 ** self.n_vars} entries, "
                f"got {len(self.truth_table)}"
            )
        if any(bit not in (0, 1) for bit in self.truth_table):
            raise FuzzyError("Truth table entries must be 0 or 1")

    @property
    def minterms(self) -> list[int]:
        """Assignments where the table is 1, ascending."""
        return [i for i, bit in enumerate(self.truth_table) if bit]

    def literal_bits(self) -> np.ndarray:
        """[M, N] 0/1 matrix: bit of variable k in minterm m."""
        shifts = np.arange(self.n_vars - 1, -1, -1)
        terms = np.asarray(self.minterms, dtype=np.int64).reshape(-1, 1)
        return (terms >> shifts) & 1

    def to_hex(self) -> str:
        """Table as a hex number whose leading bit is entry 0."""
        width = max(1, -(-len(self.truth_table) // 4))
        value = int("".join(str(b) for b in self.truth_table), 2)
        return f"{value:0{width}x}"

    @classmethod
    def from_hex(cls, text: str, n_vars: int) -> "FuzzyExpr":
        """
        Decode a table written by to_hex.

        Raises:
            FuzzyError: On malformed hex or a table that does not fit N
        """
        try:
            value = int(text, 16)
        except ValueError:
            raise FuzzyError(f"Not a hex truth table: {text!r}") from None
        size = 2 ** n_vars
        bits = bin(value)[2:].zfill(size)
        if len(bits) != size:
            raise FuzzyError(f"Hex table {text!r} has more than {size} entries")
        return cls(n_vars, tuple(int(b) for b in bits))

    def describe(self) -> str:
        """Sum-of-products text, e.g. ``(~x0 & x1) | (x0 & ~x1)``."""
        if not self.minterms:
            return "0"
        products = []
        for bits in self.literal_bits():
            literals = [f"x{k}" if bit else f"~x{k}" for k, bit in enumerate(bits)]
            products.append("(" + " & ".join(literals) + ")")
        return " | ".join(products)


def sample_truth_table(n_vars: int, rng: np.random.Generator) -> FuzzyExpr:
    """Draw every table entry i.i.d. Bernoulli(0.5)."""
    if n_vars < 1:
        raise FuzzyError(f"Need at least one variable, got {n_vars}")
    table = rng.integers(0, 2, size=2 ** n_vars)
    return FuzzyExpr(n_vars, tuple(int(b) for b in table))


def sample_expressions(count: int, n_vars: int, rng: np.random.Generator) -> list[FuzzyExpr]:
    return [sample_truth_table(n_vars, rng) for _ in range(count)]


def eval_fuzzy(expr: FuzzyExpr, x: np.ndarray) -> np.ndarray:
    """
    Evaluate the sum-of-products expression.

    Each minterm becomes a product of x_k (bit set) or 1 - x_k (bit clear);
    products are combined by left-folding fuzzy_or in ascending minterm order.

    Args:
        expr: Expression to evaluate
        x: [..., N] inputs in [0, 1]

    Returns:
        [...] values in [0, 1]

    Raises:
        FuzzyError: On a last-axis length other than N or inputs outside [0, 1]
    """
    x = _check_unit_interval("eval_fuzzy", x)
    if x.ndim == 0 or x.shape[-1] != expr.n_vars:
        raise FuzzyError(f"Expected inputs with {expr.n_vars} variables, got shape {x.shape}")

    result = np.zeros(x.shape[:-1])
    bits = expr.literal_bits().astype(bool)
    for m in range(bits.shape[0]):
        term = np.prod(np.where(bits[m], x, 1.0 - x), axis=-1)
        result = term if m == 0 else fuzzy_or(result, term)
    return result


@dataclass
class RegressionDataset:
    """
    Multi-task regression data.

    Attributes:
        inputs: [num_samples, N] in [0, 1]
        targets: [num_samples, T] in [0, 1]
        train_idx: Training row indices
        val_idx: Validation row indices
        seed: Seed used for inputs and split
    """
    inputs: np.ndarray
    targets: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    seed: int

    @property
    def num_samples(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def num_tasks(self) -> int:
        return int(self.targets.shape[1])

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """(inputs, targets) of the "train" or "val" split."""
        if name == "train":
            rows = self.train_idx
        elif name == "val":
            rows = self.val_idx
        else:
            raise FuzzyError(f"Unknown split: {name}")
        return self.inputs[rows], self.targets[rows]

    def to_csv(self, path: str | Path) -> Path:
        """Write all rows with header x0..x{N-1}, f0..f{T-1}."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        n_vars = self.inputs.shape[1]
        header = ",".join(
            [f"x{k}" for k in range(n_vars)] + [f"f{t}" for t in range(self.num_tasks)]
        )
        np.savetxt(
            path,
            np.hstack([self.inputs, self.targets]),
            delimiter=",",
            header=header,
            comments="",
            fmt="%.17g",
        )
        return path


def gen_dataset(exprs: list[FuzzyExpr], num_samples: int, seed: int) -> RegressionDataset:
    """
    Sample uniform inputs and evaluate every expression on them.

    Args:
        exprs: Task expressions, all over the same N
        num_samples: Number of rows
        seed: Seed for inputs and the 80/20 split

    Returns:
        RegressionDataset, bit-identical for equal (exprs, num_samples, seed)

    Raises:
        FuzzyError: On empty exprs, mixed N or num_samples < 10
    """
    if not exprs:
        raise FuzzyError("Need at least one expression")
    if num_samples < MIN_SAMPLES:
        raise FuzzyError(f"Need at least {MIN_SAMPLES} samples, got {num_samples}")
    n_vars = exprs[0].n_vars
    if any(e.n_vars != n_vars for e in exprs):
        raise FuzzyError("All expressions must share the same number of variables")

    rng = np.random.default_rng(seed)
    inputs = rng.random((num_samples, n_vars))
    targets = np.stack([eval_fuzzy(e, inputs) for e in exprs], axis=1)
    train_idx, val_idx = train_test_split(
        np.arange(num_samples),
        test_size=VALIDATION_FRACTION,
        random_state=seed,
        shuffle=True,
    )
    logger.debug(
        f"Generated {num_samples} samples for {len(exprs)} tasks "
        f"({len(train_idx)} train / {len(val_idx)} val)"
    )
    return RegressionDataset(
        inputs=inputs,
        targets=targets,
        train_idx=np.sort(train_idx),
        val_idx=np.sort(val_idx),
        seed=seed,
    )


def r2_score(pred: np.ndarray, target: np.ndarray) -> float:
    """
    Coefficient of determination 1 - SS_res / SS_tot.

    Raises:
        FuzzyError: On length mismatch, fewer than 2 samples or constant target
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if pred.shape != target.shape:
        raise FuzzyError(f"Prediction length {pred.size} != target length {target.size}")
    if target.size < 2:
        raise FuzzyError("R^2 needs at least 2 samples")
    if np.all(target == target[0]):
        raise FuzzyError("R^2 is undefined for a target with zero variance")
    return float(sklearn_r2_score(target, pred))


def r2_per_task(pred: np.ndarray, target: np.ndarray) -> list[float]:
    """R^2 of every column of [S, T] predictions."""
    if pred.shape != target.shape or pred.ndim != 2:
        raise FuzzyError(f"Shape mismatch: {pred.shape} vs {target.shape}")
    return [r2_score(pred[:, t], target[:, t]) for t in range(target.shape[1])]
