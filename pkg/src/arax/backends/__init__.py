from .device import Device, DeviceDescriptor, CompletionToken, synthesized_info
from .kernels import KernelImpl, BUILTIN_KERNELS, builtin

__all__ = [
    "Device",
    "DeviceDescriptor",
    "CompletionToken",
    "synthesized_info",
    "KernelImpl",
    "BUILTIN_KERNELS",
    "builtin",
]
