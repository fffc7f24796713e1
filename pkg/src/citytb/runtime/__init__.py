from .availability import Availability
from .motap import ImageTooLarge, MotapEngine, MotapTransfer, NodeImage
from .overlay import demux_frame, mux_frame
from .reservations import (
    AuthError,
    NotReservable,
    Reservation,
    ReservationConflict,
    ReservationSystem,
    UnknownReservationUrn,
)
from .sessions import (
    ExperimentSession,
    Expired,
    InvalidKey,
    NodeUnreachable,
    NotInReservation,
    NotStartedYet,
    SessionManager,
)

__all__ = [
    "AuthError",
    "Availability",
    "ExperimentSession",
    "Expired",
    "ImageTooLarge",
    "InvalidKey",
    "MotapEngine",
    "MotapTransfer",
    "NodeImage",
    "NodeUnreachable",
    "NotInReservation",
    "NotReservable",
    "NotStartedYet",
    "Reservation",
    "ReservationConflict",
    "ReservationSystem",
    "SessionManager",
    "UnknownReservationUrn",
    "demux_frame",
    "mux_frame",
]
