from .events import (
    Channel,
    DecodeError,
    Kind,
    ManagementEvent,
    PayloadField,
    Topic,
    TopicMismatch,
    UnknownEventType,
    decode_event,
    encode_event,
    event_topic,
    new_correlation_id,
)
from .broker import Broker, Subscription

__all__ = [
    "Broker",
    "Channel",
    "DecodeError",
    "Kind",
    "ManagementEvent",
    "PayloadField",
    "Subscription",
    "Topic",
    "TopicMismatch",
    "UnknownEventType",
    "decode_event",
    "encode_event",
    "event_topic",
    "new_correlation_id",
]
