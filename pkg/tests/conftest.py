import pytest

from dynfield import diffmath as dm


@pytest.fixture(autouse=True)
def _restore_numeric_profile():
    """The numeric profile is process-global; keep tests order-independent."""
    before = dm.get_profile()
    yield
    dm.set_profile(before)
