import os

DATA_DIR = os.environ.get('TINYMR_DATA') or os.path.expanduser('~/.tinymr')
if not os.path.exists(DATA_DIR):
    DATA_DIR = 'data'


def get_data_filename(filename):
    """
    Get a path referring to a given filename in tinymr's data directory,
    where generated datasets, curves and reports are written when the CLI
    isn't given an explicit `--out`. The directory can be specified with the
    environment variable TINYMR_DATA, and defaults to `~/.tinymr`.
    """
    return os.path.join(DATA_DIR, filename)


def ensure_dir(path):
    """
    Create a directory (and its parents) if it doesn't exist yet, and return
    its path.
    """
    os.makedirs(path, exist_ok=True)
    return path


def parse_addr(addr, default_host='127.0.0.1'):
    """
    Split a `host:port` string into a (host, port) pair.

    >>> parse_addr('10.0.0.7:9000')
    ('10.0.0.7', 9000)
    >>> parse_addr(':9000')
    ('127.0.0.1', 9000)
    """
    host, _sep, port = addr.rpartition(':')
    if not port.isdigit():
        raise ValueError("Address %r should look like host:port" % addr)
    return (host or default_host, int(port))
