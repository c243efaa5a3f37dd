import ast
import re
import typing

NUMBERED_ITEM = re.compile(r'^\s*(\d+)\s*[.)]\s*(.*?)\s*$')


def extract_attr_with_regex(
    input_str: str,
    regex: str,
    strip_chars: str = None,
    ignore_case: bool = True,
    select: str = 'longest',
):
    """Return one match of ``regex`` in ``input_str``, or None.

    ``select`` picks the ``'longest'`` or the ``'first'`` match. When the pattern has
    a capturing group, the group is returned.
    """
    flags = re.IGNORECASE if ignore_case else 0
    pattern = re.compile(regex, flags)
    match = re.findall(pattern, input_str)
    if match:
        match = max(match, key=len) if select == 'longest' else match[0]
        match = match.strip(strip_chars) if strip_chars else match.strip()
        return match
    else:
        return None


def split_numbered_item(line: str) -> typing.Optional[typing.Tuple[int, str]]:
    """``'2. red car'`` -> ``(2, 'red car')``; lines without a number give None."""
    match = NUMBERED_ITEM.match(line)
    if not match:
        return None
    return int(match.group(1)), match.group(2)


def parse_bracketed_list(body: str) -> typing.List[str]:
    """Parse the inside of ``[...]`` into strings, tolerating missing quotes."""
    body = body.strip()
    if not body:
        return []
    try:
        value = ast.literal_eval(f'[{body}]')
    except Exception:
        value = None
    if isinstance(value, list) and all(isinstance(item, str) for item in value):
        return [item.strip() for item in value if item.strip()]
    items = [item.strip().strip('\'"').strip() for item in body.split(',')]
    return [item for item in items if item]
