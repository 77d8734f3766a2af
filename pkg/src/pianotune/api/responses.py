from pydantic import BaseModel


class ErrorResponse(BaseModel):
    """Standard error response format."""

    status: str = "error"
    message: str
    error_code: str | None = None
    details: dict | None = None


class ScoreWireResponse(BaseModel):
    """The four ratings under their short wire names."""

    CE: float
    CU: float
    PC: float
    PQ: float


class MockStateResponse(BaseModel):
    requests_served: int
    pending_failures: list[int]
    delay_seconds: float
