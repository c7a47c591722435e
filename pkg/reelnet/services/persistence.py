"""
Checkpoint files for ReelNet.

Layout (all integers little-endian, see docs/checkpoint_format.md):

    magic 'RNCK' | u16 version | u32 header length | header SHA-256 | JSON header | payload

The JSON header holds both configs, the session records and a section table;
every section records its offset into the payload, its byte length, dtype,
shape and SHA-256. Weight sections are raw little-endian IEEE-754, mask
sections are the bit-packed layout from services.subnet.
"""

import hashlib
import json
import logging
import os
import struct
from collections import OrderedDict
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch
from filelock import FileLock

from reelnet.config import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from reelnet.errors import (
    CheckpointError,
    ChecksumError,
    CorruptMaskError,
    TruncatedCheckpointError,
    VersionMismatchError,
)
from reelnet.services.compress import QuantizedStore, QuantizedTensor, channel_rows, dequantize
from reelnet.services.model import ModelConfig, ParameterStore
from reelnet.services.path_utils import find_stage_checkpoints, stage_checkpoint_path
from reelnet.services.subnet import SessionMaskSet, pack_masks, unpack_masks
from reelnet.services.training import SessionRecord, TrainConfig, TrainedState

logger = logging.getLogger(__name__)

_PREAMBLE = struct.Struct('<4sHI32s')

_DTYPES: Dict[str, Tuple[torch.dtype, str]] = {
    'float32': (torch.float32, '<f4'),
    'float64': (torch.float64, '<f8'),
    'uint8': (torch.uint8, '|u1'),
    'int32': (torch.int32, '<i4'),
}
_DTYPE_NAMES = {torch_dtype: name for name, (torch_dtype, _) in _DTYPES.items()}


def _tensor_bytes(tensor: torch.Tensor) -> Tuple[str, bytes]:
    name = _DTYPE_NAMES.get(tensor.dtype)
    if name is None:
        raise CheckpointError(f"cannot store tensors of dtype {tensor.dtype}")
    array = tensor.detach().cpu().contiguous().numpy().astype(_DTYPES[name][1], copy=False)
    return name, array.tobytes()


def _tensor_from_bytes(data: bytes, dtype_name: str, shape: List[int]) -> torch.Tensor:
    if dtype_name not in _DTYPES:
        raise CheckpointError(f"unknown section dtype '{dtype_name}'")
    torch_dtype, np_dtype = _DTYPES[dtype_name]
    array = np.frombuffer(data, dtype=np_dtype).reshape(shape)
    return torch.from_numpy(array.astype(array.dtype.newbyteorder('='), copy=True)).to(torch_dtype)


class _SectionWriter:
    """Accumulates payload bytes and the matching section table."""

    def __init__(self):
        self.sections: List[Dict[str, Any]] = []
        self.chunks: List[bytes] = []
        self.offset = 0

    def add(self, name: str, data: bytes, **meta) -> None:
        entry = {'name': name, 'offset': self.offset, 'length': len(data),
                 'sha256': hashlib.sha256(data).hexdigest()}
        entry.update(meta)
        self.sections.append(entry)
        self.chunks.append(data)
        self.offset += len(data)

    def add_tensor(self, name: str, tensor: torch.Tensor, **meta) -> None:
        dtype_name, data = _tensor_bytes(tensor)
        self.add(name, data, dtype=dtype_name, shape=list(tensor.shape), **meta)

    def add_quantized(self, name: str, q: QuantizedTensor) -> None:
        self.add_tensor(name, q.codes, bits=q.bits, minimum=q.minimum, scale=q.scale,
                        value_dtype=_DTYPE_NAMES[q.dtype])


# ---------------------------------------------------------------------------
# Save
# ---------------------------------------------------------------------------

def encode_checkpoint(state: TrainedState, include_scores: bool = True) -> bytes:
    """Serialize a trained state to checkpoint bytes (deterministic)."""
    writer = _SectionWriter()
    quantized: Optional[QuantizedStore] = state.quantized

    if quantized is None:
        for name, tensor in state.params.weights.items():
            writer.add_tensor(f'weight/{name}', tensor)
        if include_scores:
            for name, tensor in state.params.scores.items():
                writer.add_tensor(f'score/{name}', tensor)
        for session in sorted(state.params.heads):
            for name, tensor in state.params.heads[session].items():
                writer.add_tensor(f'head/{session}/{name}', tensor)
    else:
        for name, q in quantized.weights.items():
            writer.add_quantized(f'weight/{name}', q)
        for session in sorted(quantized.heads):
            for name, q in quantized.heads[session].items():
                writer.add_quantized(f'head/{session}/{name}', q)

    names = state.masks.names
    for session in range(state.masks.session_count):
        masks = state.masks.mask(session)
        writer.add(f'mask/{session}', pack_masks([masks[n] for n in names]))

    header = {
        'model_config': state.model_config.to_dict(),
        'train_config': state.train_config.to_dict(),
        'records': [r.to_dict() for r in state.records],
        'seed': state.params.seed,
        'mask_shapes': [[n, list(state.masks.shapes[n])] for n in names],
        'sessions': state.masks.session_count,
        'bits': None if quantized is None else quantized.bits,
        'sections': writer.sections,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(',', ':')).encode('utf-8')
    preamble = _PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_bytes),
                              hashlib.sha256(header_bytes).digest())
    return preamble + header_bytes + b''.join(writer.chunks)


def save(state: TrainedState, path: str, include_scores: bool = True) -> None:
    """Write a checkpoint atomically under an exclusive file lock."""
    data = encode_checkpoint(state, include_scores)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    lock = FileLock(path + '.lock')
    with lock:
        tmp_path = path + '.tmp'
        with open(tmp_path, 'wb') as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_path, path)
    logger.info("Saved checkpoint %s (%d sessions, %d bytes)", path, state.masks.session_count, len(data))


def save_stage(state: TrainedState, checkpoint_path: str) -> str:
    """Write the stage checkpoint for the last finished session."""
    target = stage_checkpoint_path(checkpoint_path, state.masks.session_count - 1)
    save(state, target, include_scores=False)
    return target


# ---------------------------------------------------------------------------
# Load
# ---------------------------------------------------------------------------

def decode_checkpoint(data: bytes, source: str = '<bytes>') -> TrainedState:
    if len(data) < _PREAMBLE.size:
        raise TruncatedCheckpointError(f"{source}: file too short for a checkpoint header")
    magic, version, header_length, header_sha = _PREAMBLE.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{source}: not a ReelNet checkpoint")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(
            f"{source}: checkpoint format version {version}, this build reads version {CHECKPOINT_VERSION}"
        )
    start = _PREAMBLE.size
    if len(data) < start + header_length:
        raise TruncatedCheckpointError(f"{source}: header cut off")
    header_bytes = data[start:start + header_length]
    if hashlib.sha256(header_bytes).digest() != header_sha:
        raise ChecksumError(f"{source}: checksum mismatch in the header")
    try:
        header = json.loads(header_bytes.decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{source}: unreadable header: {e}") from None
    payload = memoryview(data)[start + header_length:]
    try:
        return _decode_body(header, payload, source)
    except (KeyError, TypeError, IndexError) as e:
        raise CheckpointError(f"{source}: malformed header ({type(e).__name__}: {e})") from None


def _quantized_entry(entry: Dict[str, Any], codes: torch.Tensor, source: str) -> QuantizedTensor:
    q = QuantizedTensor(entry['bits'], list(entry['minimum']), list(entry['scale']), codes,
                        _DTYPES[entry['value_dtype']][0])
    expected = 0 if q.bits == 32 else channel_rows(codes).shape[0]
    # a single range covers the whole tensor
    allowed = {expected, 1} if expected else {0}
    if len(q.minimum) not in allowed or len(q.scale) != len(q.minimum):
        raise CheckpointError(
            f"{source}: section '{entry['name']}' has {len(q.minimum)} ranges for {expected} channels"
        )
    return q


def _decode_body(header: Dict[str, Any], payload: memoryview, source: str) -> TrainedState:
    blobs: Dict[str, Tuple[Dict[str, Any], bytes]] = OrderedDict()
    for entry in header['sections']:
        end = entry['offset'] + entry['length']
        if end > len(payload):
            raise TruncatedCheckpointError(f"{source}: section '{entry['name']}' is cut off")
        blob = bytes(payload[entry['offset']:end])
        if hashlib.sha256(blob).hexdigest() != entry['sha256']:
            raise ChecksumError(f"{source}: checksum mismatch in section '{entry['name']}'")
        blobs[entry['name']] = (entry, blob)

    model_config = ModelConfig.from_dict(header['model_config'])
    train_config = TrainConfig.from_dict(header['train_config'])
    shapes = OrderedDict((name, tuple(shape)) for name, shape in header['mask_shapes'])
    bits = header.get('bits')

    masks = SessionMaskSet(dict(shapes))
    for session in range(header['sessions']):
        if f'mask/{session}' not in blobs:
            raise TruncatedCheckpointError(
                f"{source}: header lists {header['sessions']} sessions but section 'mask/{session}' is missing"
            )
        entry, blob = blobs[f'mask/{session}']
        try:
            unpacked = unpack_masks(blob, list(shapes.values()))
        except CorruptMaskError as e:
            raise CorruptMaskError(f"{source}: section 'mask/{session}': {e}") from None
        masks.add_session(dict(zip(shapes, unpacked)))

    weights: 'OrderedDict[str, Any]' = OrderedDict()
    scores: 'OrderedDict[str, torch.Tensor]' = OrderedDict()
    heads: Dict[int, Dict[str, Any]] = {}
    for name, (entry, blob) in blobs.items():
        kind, _, rest = name.partition('/')
        if kind == 'mask':
            continue
        tensor = _tensor_from_bytes(blob, entry['dtype'], entry['shape'])
        if bits is not None:
            tensor = _quantized_entry(entry, tensor, source)
        if kind == 'weight':
            weights[rest] = tensor
        elif kind == 'score':
            scores[rest] = tensor
        elif kind == 'head':
            session, _, tensor_name = rest.partition('/')
            heads.setdefault(int(session), {})[tensor_name] = tensor
        else:
            raise CheckpointError(f"{source}: unknown section '{name}'")

    quantized = None
    if bits is None:
        params = ParameterStore(weights=weights, scores=scores, heads=heads, seed=header['seed'])
    else:
        quantized = QuantizedStore(bits, weights, heads, masks, header['seed'])
        params = dequantize(quantized)

    records = [SessionRecord.from_dict(r) for r in header.get('records', [])]
    return TrainedState(model_config, train_config, params, masks, records, quantized)


def load(path: str) -> TrainedState:
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    state = decode_checkpoint(data, path)
    logger.info("Loaded checkpoint %s (%d sessions%s)", path, state.masks.session_count,
                '' if state.quantized is None else f', {state.quantized.bits}-bit')
    return state


def load_stages(checkpoint_path: str) -> List[TrainedState]:
    """Stage checkpoints for sessions 0..N-1, or [] when any is missing."""
    found = find_stage_checkpoints(checkpoint_path)
    if not found or sorted(found) != list(range(len(found))):
        return []
    return [load(found[s]) for s in sorted(found)]
