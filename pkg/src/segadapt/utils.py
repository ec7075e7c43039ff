import contextlib
import dataclasses
import hashlib
import json
import os
import tempfile

from segadapt.exceptions import WorkdirLockedError


def canonical_json(obj):
    if dataclasses.is_dataclass(obj):
        obj = dataclasses.asdict(obj)
    return json.dumps(obj, sort_keys=True, separators=(',', ':'))


def config_hash(obj):
    return hashlib.sha256(canonical_json(obj).encode('utf-8')).hexdigest()


def derive_seed(*parts):
    '''
    Stable 32 bit seed from any printable parts, independent of PYTHONHASHSEED
    '''
    digest = hashlib.sha256(':'.join(str(p) for p in parts).encode('utf-8')).hexdigest()
    return int(digest[:8], 16)


def atomic_write_bytes(path, data):
    dirpath = os.path.dirname(os.path.abspath(path))
    os.makedirs(dirpath, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=dirpath, prefix='.tmp-')
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode('utf-8'))


def write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + '\n')


def resolve_path(path, workdir=None):
    if path is None:
        return None
    if os.path.isabs(path) or workdir is None:
        return path
    return os.path.join(workdir, path)


@contextlib.contextmanager
def workdir_lock(workdir):
    os.makedirs(workdir, exist_ok=True)
    lock_path = os.path.join(workdir, '.segadapt.lock')
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise WorkdirLockedError(
            f'{workdir} is in use by another segadapt process (remove {lock_path} if stale)'
        )
    try:
        os.write(fd, str(os.getpid()).encode('ascii'))
        os.close(fd)
        yield lock_path
    finally:
        if os.path.exists(lock_path):
            os.remove(lock_path)
