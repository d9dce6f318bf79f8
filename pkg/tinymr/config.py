"""
You can configure tinymr with the following environment variables:

    TINYMR_LOG - log verbosity: DEBUG, INFO, WARNING (default) or ERROR
    TINYMR_HEARTBEAT_MS - how often workers send heartbeats (default 500)
    TINYMR_HEARTBEAT_MISSES - missed heartbeats before a worker is declared
        failed (default 3)
    TINYMR_RESTART_CAP - how many job-level restarts to attempt before giving
        up (default 3)
    TINYMR_CONNECT_RETRIES - seconds to keep retrying a connection (default 10)

Jobs, profiles and scenarios are described by flat `key = value` text files,
read with `read_config_file`.
"""
import logging
import os
import sys

LOG_LEVEL = os.environ.get('TINYMR_LOG', 'WARNING').upper()
HEARTBEAT_MS = int(os.environ.get('TINYMR_HEARTBEAT_MS', '500'))
HEARTBEAT_MISSES = int(os.environ.get('TINYMR_HEARTBEAT_MISSES', '3'))
RESTART_CAP = int(os.environ.get('TINYMR_RESTART_CAP', '3'))
CONNECT_RETRIES = int(os.environ.get('TINYMR_CONNECT_RETRIES', '10'))

LOG_FORMAT = '%(asctime)s %(name)s %(levelname)s: %(message)s'


class ConfigError(ValueError):
    """
    A configuration file or override couldn't be understood. `line` is the
    1-based line number in the file, when there is one.
    """
    def __init__(self, message, line=None):
        if line is not None:
            message = 'line %d: %s' % (line, message)
        super().__init__(message)
        self.line = line


def configure_logging(level=None, stream=None):
    """
    Send tinymr's log messages to stderr at the level named by TINYMR_LOG.
    Calling this more than once only changes the level.
    """
    level = (level or LOG_LEVEL).upper()
    root = logging.getLogger('tinymr')
    if not root.handlers:
        handler = logging.StreamHandler(stream or sys.stderr)
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(handler)
    root.setLevel(getattr(logging, level, logging.WARNING))
    return root


def coerce_value(text):
    """
    Turn the text of a config value into an int, float, bool, or string,
    whichever fits first.

    >>> coerce_value('12')
    12
    >>> coerce_value('1.5')
    1.5
    >>> coerce_value('true')
    True
    >>> coerce_value('eaglet')
    'eaglet'
    """
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    if text.lower() in ('true', 'yes', 'on'):
        return True
    if text.lower() in ('false', 'no', 'off'):
        return False
    return text


def parse_config_lines(lines):
    """
    Parse flat `key = value` lines. Blank lines and lines starting with `#`
    are skipped.
    """
    values = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith('#'):
            continue
        if '=' not in line:
            raise ConfigError("expected 'key = value', got %r" % line, lineno)
        key, value = line.split('=', 1)
        key = key.strip()
        if not key:
            raise ConfigError("missing key", lineno)
        values[key] = coerce_value(value)
    return values


def read_config_file(filename):
    with open(filename, encoding='utf-8') as file:
        return parse_config_lines(file)


def write_config_file(values, filename):
    with open(filename, 'w', encoding='utf-8') as out:
        for key, value in values.items():
            print('%s = %s' % (key, value), file=out)


def merge_overrides(values, overrides, allowed=None):
    """
    Combine values from a config file with overrides from command-line flags.
    Overrides win. Overrides whose value is None were not given and are
    ignored. If `allowed` is given, any key outside it is rejected.
    """
    merged = dict(values)
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    if allowed is not None:
        unknown = sorted(set(merged) - set(allowed))
        if unknown:
            raise ConfigError("unknown setting(s): %s" % ', '.join(unknown))
    return merged
