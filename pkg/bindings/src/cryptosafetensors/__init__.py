"""Drop-in safetensors-style API over encrypted tensor containers.

Swap ``safetensors`` for ``cryptosafetensors`` and existing loader code keeps
working: plain files behave exactly as before, encrypted files decrypt
transparently using keys configured through the CT_* environment variables
(or an explicit ``cryptotensors.OpenOptions``).

    from cryptosafetensors import safe_open
    with safe_open("model.ct", framework="numpy") as f:
        w = f.get_tensor("layer.0.weight")
"""

from __future__ import annotations

from typing import Optional

import cryptotensors as ct

from ._compat import array_from_buffer, resolve_options

__version__ = "0.1.0"

_FRAMEWORKS = ("numpy", "np")


class TensorSlice:
    """Lazy slice handle: index it like an array to materialize just that
    part (``f.get_slice(name)[0:2, 4]``)."""

    def __init__(self, handle: ct.LoadHandle, name: str):
        self._handle = handle
        self._name = name
        self._info = handle.tensor_info(name)

    def get_shape(self) -> list[int]:
        return list(self._info.shape)

    def get_dtype(self) -> str:
        return self._info.dtype.value

    def __getitem__(self, key):
        shape = self._info.shape
        if not isinstance(key, tuple):
            key = (key,)
        if len(key) > len(shape):
            raise IndexError(f"too many indices for shape {shape}")
        ranges: list[tuple[int, int]] = []
        drop_axes: list[int] = []
        for axis, item in enumerate(key):
            dim = shape[axis]
            if isinstance(item, int):
                idx = item + dim if item < 0 else item
                if not 0 <= idx < dim:
                    raise IndexError(f"index {item} out of range for axis {axis} of size {dim}")
                ranges.append((idx, idx + 1))
                drop_axes.append(axis)
            elif isinstance(item, slice):
                if item.step not in (None, 1):
                    raise ValueError("only contiguous slices (step 1) are supported")
                start, stop, _ = item.indices(dim)
                ranges.append((start, max(start, stop)))
            else:
                raise TypeError(f"unsupported index {item!r}")
        dtype, sliced_shape, buf = self._handle.get_slice(self._name, ranges)
        array = array_from_buffer(dtype, sliced_shape, buf)
        if drop_axes:
            array = array.reshape(
                [d for axis, d in enumerate(sliced_shape) if axis not in drop_axes]
            )
        return array


class SafeOpenHandle:
    """Open container with the reference loader's surface: keys(), metadata(),
    get_tensor(), get_slice(); decryption is transparent and cached."""

    def __init__(self, handle: ct.LoadHandle):
        self._handle = handle

    def keys(self) -> list[str]:
        return self._handle.names()

    def metadata(self) -> dict[str, str]:
        return self._handle.metadata()

    def get_tensor(self, name: str):
        dtype, shape, buf = self._handle.get_tensor(name)
        return array_from_buffer(dtype, shape, buf)

    def get_slice(self, name: str) -> TensorSlice:
        return TensorSlice(self._handle, name)

    def decrypt_stats(self) -> dict[str, int]:
        return self._handle.decrypt_stats()

    def close(self) -> None:
        self._handle.close()

    def __enter__(self) -> "SafeOpenHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def safe_open(
    filename,
    framework: str = "numpy",
    device: str = "cpu",
    options: Optional[ct.OpenOptions] = None,
) -> SafeOpenHandle:
    """Open a (possibly encrypted) container for lazy tensor access.

    ``framework`` accepts "numpy"/"np"; ``device`` other than "cpu" is not
    supported. Without explicit ``options``, trust roots come from the CT_*
    environment variables.
    """
    if framework not in _FRAMEWORKS:
        raise ValueError(f"unsupported framework {framework!r}; this binding serves {_FRAMEWORKS}")
    if device != "cpu":
        raise ValueError("only cpu loading is supported")
    return SafeOpenHandle(ct.open(filename, resolve_options(options)))


__all__ = ["SafeOpenHandle", "TensorSlice", "safe_open", "__version__"]
