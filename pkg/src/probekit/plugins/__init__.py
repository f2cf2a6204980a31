from probekit.plugins.base import (
    CapabilityDenied,
    OptionError,
    OptionSpec,
    PluginDescriptor,
    PluginError,
    PluginInstance,
    Reporter,
    UnknownPlugin,
)
from probekit.plugins.bus import ActivityTrace, EventBus
from probekit.plugins.registry import (
    describe_all,
    get_descriptor,
    instantiate,
    poll,
    subscribe,
    unsubscribe,
)

__all__ = [
    "ActivityTrace",
    "CapabilityDenied",
    "EventBus",
    "OptionError",
    "OptionSpec",
    "PluginDescriptor",
    "PluginError",
    "PluginInstance",
    "Reporter",
    "UnknownPlugin",
    "describe_all",
    "get_descriptor",
    "instantiate",
    "poll",
    "subscribe",
    "unsubscribe",
]
