"""Key-value config files with nested sections.

The grammar is INI as accepted by ``configparser``: ``[section]`` headers
followed by ``key = value`` lines, ``#`` comments allowed. Nesting uses
dotted section names (``[bundle.0]``, ``[bundle.1]``). Values are plain
strings; list-valued entries are comma separated. Shared by scene specs,
training configs, and experiment configs.
"""

import configparser


def load_config(path):
    """Parse a config file into {section: {key: value_str}}."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.optionxform = str
    read = parser.read(path)
    if not read:
        raise FileNotFoundError(path)
    return {name: dict(parser[name]) for name in parser.sections()}


def dump_config(path, sections):
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for name, values in sections.items():
        parser[name] = {k: str(v) for k, v in values.items()}
    with open(path, "w") as fh:
        parser.write(fh)


def parse_floats(value):
    return [float(v) for v in str(value).replace(",", " ").split()]


def parse_ints(value):
    return [int(v) for v in str(value).replace(",", " ").split()]


def parse_bool(value):
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")
