
import pytest

from duplexrag.cli import fixture_dir
from duplexrag.datasynth import ConversationScript, load_scripts
from duplexrag.tokens import EmbeddingTables

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def scripts():
    return {s.script_id: s for s in load_scripts(fixture_dir())}


@pytest.fixture(scope="session")
def tables():
    return EmbeddingTables.random(0)


def rag_script(lead_words=12, body_words=10, script_id="probe", greeting=False):
    """One user question and one retrieval turn with a lead of ``lead_words`` words."""
    turns = []
    if greeting:
        turns.append({"speaker": "model", "text": "hello there how can i help", "greeting": True})
    turns.append({"speaker": "user", "text": "what is the capital of france"})
    turns.append({"speaker": "model",
                  "lead": " ".join(["well"] * lead_words),
                  "body": "paris is the capital " + " ".join(["city"] * max(0, body_words - 4)),
                  "tail": "anything else",
                  "reference": "Paris is the capital of France.",
                  "keyword": "Paris"})
    return ConversationScript.from_dict({"script_id": script_id, "topic": "t", "variant": "v1",
                                         "turns": turns})


def plain_script(script_id="plain"):
    return ConversationScript.from_dict({
        "script_id": script_id, "topic": "t", "variant": "v1",
        "turns": [{"speaker": "model", "text": "hi there", "greeting": True},
                  {"speaker": "user", "text": "tell me about the weather"},
                  {"speaker": "model", "text": "it is sunny today in paris", "keyword": "sunny"}]})


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def record_acceptance(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
