'''
Named-tensor container.

  b'SGADCKPT' | uint32 LE header length | JSON header | float32 LE payloads

The header lists every tensor as {name, shape, offset, count} (offset in
bytes from the start of the payload block) plus free-form metadata.
'''
import json
import struct

import numpy as np

from segadapt.exceptions import CheckpointError
from segadapt.utils import atomic_write_bytes

MAGIC = b'SGADCKPT'
VERSION = 1


def dumps(groups, metadata=None):
    '''
    groups: {group name: NamedTensors or None}
    '''
    entries = []
    payloads = []
    offset = 0
    for group, tensors in groups.items():
        if tensors is None:
            continue
        for name, value in tensors.items():
            payload = np.ascontiguousarray(value, dtype='<f4').tobytes()
            entries.append({
                'group': group,
                'name': name,
                'shape': list(value.shape),
                'offset': offset,
                'count': int(value.size),
            })
            payloads.append(payload)
            offset += len(payload)

    header = json.dumps(
        {'version': VERSION, 'tensors': entries, 'metadata': metadata or {}},
        sort_keys=True,
        separators=(',', ':')
    ).encode('utf-8')
    return MAGIC + struct.pack('<I', len(header)) + header + b''.join(payloads)


def loads(data):
    '''
    Returns ({group: [(name, array)]}, metadata)
    '''
    if len(data) < len(MAGIC) + 4 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError('Not a segadapt checkpoint (bad magic)')
    (header_length,) = struct.unpack('<I', data[len(MAGIC):len(MAGIC) + 4])
    start = len(MAGIC) + 4
    try:
        header = json.loads(data[start:start + header_length].decode('utf-8'))
    except (UnicodeDecodeError, ValueError) as ex:
        raise CheckpointError(f'Corrupt checkpoint header: {ex}')
    if header.get('version') != VERSION:
        raise CheckpointError(f'Unsupported checkpoint version {header.get("version")}')

    payload = data[start + header_length:]
    groups = {}
    expected_end = 0
    for entry in header.get('tensors', []):
        nbytes = 4 * entry['count']
        end = entry['offset'] + nbytes
        if end > len(payload) or int(np.prod(entry['shape'], dtype=int)) != entry['count']:
            raise CheckpointError(f'Truncated or inconsistent tensor {entry["group"]}/{entry["name"]}')
        array = np.frombuffer(payload[entry['offset']:end], dtype='<f4').astype(np.float32)
        groups.setdefault(entry['group'], []).append((entry['name'], array.reshape(entry['shape'])))
        expected_end = max(expected_end, end)
    if expected_end != len(payload):
        raise CheckpointError('Trailing or missing payload bytes')
    return groups, header.get('metadata', {})


def save(path, groups, metadata=None):
    atomic_write_bytes(path, dumps(groups, metadata))


def load(path):
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except OSError as ex:
        raise CheckpointError(f'Cannot read checkpoint {path}: {ex}')
    return loads(data)
