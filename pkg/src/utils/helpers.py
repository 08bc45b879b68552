"""
Utility functions for the heterogeneous DW toolkit.
"""
import datetime
import hashlib
import math
from fractions import Fraction
from pathlib import Path
from typing import Union

Number = Union[int, float, Fraction]


def exact_decimal(value: Number) -> Fraction:
    """
    Rational value of a number as it is written in decimal.

    Floats go through their shortest repr, so 0.1 becomes 1/10 instead of the
    nearest binary fraction. Ints and Fractions pass through unchanged.
    """
    if isinstance(value, float):
        return Fraction(repr(float(value)))
    return Fraction(value)


def log_ceil(ratio: Number, base: Number) -> int:
    """
    Compute ceil(log_base(ratio)) for a base in (0, 1).

    The candidate from floating-point logarithms is corrected by comparing
    base**k against ratio in exact rational arithmetic. Pass rationals built
    with exact_decimal to get the ceiling of the decimal inputs.

    Args:
        ratio: Positive argument of the logarithm
        base: Logarithm base, strictly between 0 and 1

    Returns:
        int: The smallest integer k with base**k <= ratio
    """
    ratio_q = Fraction(ratio)
    base_q = Fraction(base)
    if ratio_q <= 0:
        raise ValueError(f"log_ceil needs a positive ratio, got {ratio}")
    if not 0 < base_q < 1:
        raise ValueError(f"log_ceil needs a base in (0, 1), got {base}")

    k = math.ceil(math.log(float(ratio_q)) / math.log(float(base_q)))
    # base < 1, so base**k decreases in k
    while base_q ** k > ratio_q:
        k += 1
    while base_q ** (k - 1) <= ratio_q:
        k -= 1
    return k


def ceil_div(numerator: Number, denominator: Number) -> int:
    """
    Exact ceiling of a quotient of two (float or rational) numbers.
    """
    return math.ceil(Fraction(numerator) / Fraction(denominator))


def log_pair_probability(n: int, length: int) -> float:
    """
    Natural log of the probability that a fixed sequence of `length` pairs is drawn.

    Args:
        n: Number of agents
        length: Number of consecutive uniform pair draws

    Returns:
        float: length * log(2 / (n (n - 1)))
    """
    return length * (math.log(2.0) - math.log(n) - math.log(n - 1))


def complement_power(log_p: float, exponent: int) -> float:
    """
    Evaluate (1 - p)**exponent with p given by its logarithm.

    Args:
        log_p: Natural log of p (p in (0, 1])
        exponent: Non-negative integer exponent

    Returns:
        float: (1 - exp(log_p)) ** exponent, computed as exp(exponent * log1p(-p))
    """
    if exponent == 0:
        return 1.0
    p = math.exp(log_p)
    if p >= 1.0:
        return 0.0
    return math.exp(exponent * math.log1p(-p))


def ensure_directory_exists(directory_path: Path) -> None:
    """
    Ensure that a directory exists, create it if it doesn't.

    Args:
        directory_path: The directory path to check/create
    """
    if not directory_path.exists():
        directory_path.mkdir(parents=True)


def generate_timestamp_filename(prefix: str, extension: str = "") -> str:
    """
    Generate a file or directory name with a timestamp.

    Args:
        prefix: The prefix for the name
        extension: The file extension (empty for directories)

    Returns:
        str: The generated name
    """
    timestamp = datetime.datetime.now().strftime("%Y%m%d_%H%M%S")
    if extension:
        return f"{prefix}_{timestamp}.{extension}"
    return f"{prefix}_{timestamp}"


def file_sha256(file_path: Path) -> str:
    """
    Hex SHA-256 digest of a file's contents.
    """
    digest = hashlib.sha256()
    with open(file_path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()
