"""Device agent."""

from probekit.agent.core import (
    Agent,
    AgentError,
    AlreadyRunning,
    DuplicateExperiment,
    InstalledExperiment,
    NotInstalled,
    SignatureRejected,
)
from probekit.agent.uploader import HttpTransport, TransportError, UploadReport, Uploader, backoff_delay

__all__ = [
    "Agent",
    "AgentError",
    "AlreadyRunning",
    "DuplicateExperiment",
    "HttpTransport",
    "InstalledExperiment",
    "NotInstalled",
    "SignatureRejected",
    "TransportError",
    "UploadReport",
    "Uploader",
    "backoff_delay",
]
