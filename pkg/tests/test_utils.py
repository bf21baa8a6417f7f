"""
Tests for utility functions.
"""

import pytest

from neuralinterp.utils import format_duration, mask_label, parse_mask, timed


class TestFormatDuration:
    """Tests for format_duration function."""

    def test_seconds(self):
        """Test formatting seconds."""
        assert format_duration(5.2) == "5.2s"

    def test_minutes(self):
        """Test formatting minutes."""
        assert format_duration(90) == "1.5m"

    def test_hours(self):
        """Test formatting hours."""
        assert format_duration(5400) == "1.5h"


class TestTimed:
    """Tests for the timing context manager."""

    def test_frozen_after_exit(self):
        """Test that elapsed time stops advancing once the block ends."""
        with timed() as elapsed:
            pass
        first = elapsed()
        assert first >= 0.0
        assert elapsed() == first


class TestMasks:
    """Tests for keep-mask strings."""

    def test_label(self):
        """Test bit-string labels."""
        assert mask_label([True, False, True, True]) == "1011"

    def test_parse(self):
        """Test parsing with surrounding whitespace."""
        assert parse_mask(" 0110 ") == [False, True, True, False]
        assert mask_label(parse_mask("1001")) == "1001"

    @pytest.mark.parametrize("text", ["", "12", "1 0", "abc"])
    def test_invalid(self, text):
        """Test that anything but 0 and 1 is refused."""
        with pytest.raises(ValueError):
            parse_mask(text)
