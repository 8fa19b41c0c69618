import pytest
from cryptography.hazmat.primitives.asymmetric import ed25519, rsa

from quicshell.auth import IdentityStore, OidcIdentity, hash_password, pubkey_text
from quicshell.auth.store import parse_pubkey_line
from quicshell.tlsutil import generate_self_signed

PASSWORD = "correct horse"
CHEAP = (1 << 10, 8, 1)


@pytest.fixture(scope="session")
def certs(tmp_path_factory):
    d = tmp_path_factory.mktemp("certs")
    cert, key = d / "cert.pem", d / "key.pem"
    fp = generate_self_signed(cert, key)
    return str(cert), str(key), fp


@pytest.fixture(scope="session")
def ed_key():
    return ed25519.Ed25519PrivateKey.generate()


@pytest.fixture(scope="session")
def rsa_key():
    return rsa.generate_private_key(public_exponent=65537, key_size=2048)


@pytest.fixture(scope="session")
def other_key():
    return ed25519.Ed25519PrivateKey.generate()


OIDC_ISSUER = "https://idp.example.test"


@pytest.fixture(scope="session")
def store(ed_key, rsa_key):
    return IdentityStore({
        "alice": [hash_password(PASSWORD, cost=CHEAP),
                  parse_pubkey_line(pubkey_text(ed_key.public_key()) + " alice@test"),
                  parse_pubkey_line(pubkey_text(rsa_key.public_key()))],
        "bob": [OidcIdentity(OIDC_ISSUER, "bob@example.test")],
    })


URL_PATH = "/ssh3-e2e"


# -- acceptance summary ----------------------------------------------------------------
# Tests marked ``criterion(number, title)`` are aggregated into one PASS/FAIL line
# per criterion at the end of the run.

_criteria: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and not rep.failed):
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "passed": True, "details": []})
    if rep.failed:
        entry["passed"] = False
    for key, value in rep.user_properties:
        entry["details"].append(f"{key}={value}")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        verdict = "PASS" if entry["passed"] else "FAIL"
        details = f" [{', '.join(entry['details'])}]" if entry["details"] else ""
        terminalreporter.write_line(f"criterion {number:>2} {verdict}: {entry['title']}{details}")
