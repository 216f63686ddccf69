import enum


class Verdict(enum.Enum):
    """Outcome of a verifier or judge.

    Judges only ever emit CORRECT or INCORRECT. INCONCLUSIVE comes from the
    antiderivative checker when too few sample points survive, and is scored
    as reward 0.
    """

    CORRECT = "correct"
    INCORRECT = "incorrect"
    INCONCLUSIVE = "inconclusive"

    @property
    def reward(self) -> float:
        return 1.0 if self is Verdict.CORRECT else 0.0
