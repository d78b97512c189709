"""Click utilities."""

import math
import typing as t

import click


class OptionEatAll(click.Option):
    """An option that takes every following argument up to the next option, e.g. ``--ranges 54 100 200``."""

    def __init__(self, *args: t.Any, **kwargs: t.Any) -> None:
        """Override."""
        self.save_other_options = kwargs.pop("save_other_options", True)
        nargs = kwargs.pop("nargs", -1)
        if nargs != -1:
            raise ValueError(f"nargs, if set, must be -1 not {nargs}")
        super().__init__(*args, **kwargs)
        self._previous_parser_process: t.Optional[t.Callable[..., t.Any]] = None
        self._eat_all_parser: t.Any = None

    def add_to_parser(self, parser: t.Any, ctx: click.Context) -> None:
        """Override."""

        def parser_process(value: str, state: t.Any) -> None:
            values = [value]
            if self.save_other_options:
                while state.rargs and not any(state.rargs[0].startswith(p) for p in self._eat_all_parser.prefixes):
                    values.append(state.rargs.pop(0))
            else:
                values += state.rargs
                state.rargs[:] = []
            self._previous_parser_process(tuple(values), state)  # type: ignore[misc]

        super().add_to_parser(parser, ctx)
        for name in self.opts:
            # pylint: disable=W0212
            our_parser = parser._long_opt.get(name) or parser._short_opt.get(name)
            if our_parser:
                self._eat_all_parser = our_parser
                self._previous_parser_process = our_parser.process
                our_parser.process = parser_process
                break


def validate_positive_integer(ctx: click.core.Context, param: t.Any, value: int) -> int:  # pylint: disable=W0613
    """Allow only positive integers and 0."""
    if value < 0:
        raise click.BadParameter("Should be a positive integer or 0.")
    return value


def validate_seed(ctx: click.core.Context, param: t.Any, value: t.Optional[int]) -> t.Optional[int]:  # noqa
    """Seeds are unsigned 64-bit integers."""
    if value is not None and not 0 <= value < 2**64:
        raise click.BadParameter("Should be an integer in [0, 2**64).")
    return value


def parse_positive_floats(
    ctx: click.core.Context, param: t.Any, value: t.Optional[t.Sequence[str]]  # pylint: disable=W0613
) -> t.Optional[t.Tuple[float, ...]]:
    """Turn the words eaten by :class:`OptionEatAll` into positive floats."""
    if value is None:
        return None
    numbers: t.List[float] = []
    for word in value:
        try:
            number = float(word)
        except ValueError as err:
            raise click.BadParameter(f"{word!r} is not a number.") from err
        if not math.isfinite(number) or number <= 0:
            raise click.BadParameter(f"{word!r} should be a positive number.")
        numbers.append(number)
    if not numbers:
        raise click.BadParameter("Expected at least one value.")
    return tuple(numbers)


def parse_range_bins(
    ctx: click.core.Context, param: t.Any, value: t.Optional[t.Sequence[str]]  # pylint: disable=W0613
) -> t.Optional[t.Tuple[t.Tuple[float, float], ...]]:
    """Turn ``0:50 50:100`` into distance bins."""
    if value is None:
        return None
    bins: t.List[t.Tuple[float, float]] = []
    for word in value:
        low, sep, high = word.partition(":")
        try:
            if not sep:
                raise ValueError(word)
            bounds = (float(low), float(high))
        except ValueError as err:
            raise click.BadParameter(f"{word!r} is not of the form LOW:HIGH.") from err
        if not 0 <= bounds[0] < bounds[1]:
            raise click.BadParameter(f"{word!r} should satisfy 0 <= LOW < HIGH.")
        bins.append(bounds)
    return tuple(bins)
