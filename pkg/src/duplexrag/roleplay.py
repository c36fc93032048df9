"""Optional script writer that drafts conversations with LLMs over HTTP.

Three roles share one endpoint and the back-end wire format: a user role that
writes the next user line, a note role that decides whether outside facts are
needed, and an assistant role that answers as ``opening || facts || closing``.
The reply text travels in the ``reference`` field. The bundled fixtures were
written by hand; this writer is for growing the corpus.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional

from .backends import PromptTemplate, TranscriptContext, TranscriptTurn, post_json
from .config import load_packaged_prompt
from .datasynth import ConversationScript, Turn

logger = logging.getLogger(__name__)

END_MARK = "END"
NO_NOTE = "NONE"


class RoleplayError(RuntimeError):
    pass


@dataclass
class RoleplayWriter:
    endpoint: str
    timeout_s: Optional[float] = 30.0
    max_user_turns: int = 3
    user_prompt: Optional[PromptTemplate] = None
    note_prompt: Optional[PromptTemplate] = None
    assistant_prompt: Optional[PromptTemplate] = None

    def __post_init__(self):
        self.user_prompt = self.user_prompt or load_packaged_prompt("user_llm")
        self.note_prompt = self.note_prompt or load_packaged_prompt("note_llm")
        self.assistant_prompt = self.assistant_prompt or load_packaged_prompt("assistant_llm")

    def _ask(self, template: PromptTemplate, turns: List[Turn], **extra) -> str:
        ctx = TranscriptContext(tuple(TranscriptTurn(t.speaker, t.spoken_text(), 0.0) for t in turns), 0.0)
        payload = {"transcript": ctx.to_wire(), "template_id": template.template_id,
                   "prompt": template.render(ctx, **extra)}
        body, outcome = post_json(self.endpoint, payload, self.timeout_s)
        if body is None or not isinstance(body.get("reference"), str):
            raise RoleplayError(f"{template.template_id}: {outcome.message or 'no reply text'}")
        return body["reference"].strip()

    def write(self, script_id: str, topic: str, keyword_hint: Optional[str] = None) -> ConversationScript:
        """Draft one conversation about ``topic``.

        Facts-bearing replies keep ``keyword_hint`` as their keyword when it
        occurs in the facts part; otherwise they become plain turns.
        """
        turns: List[Turn] = []
        for _ in range(self.max_user_turns):
            line = self._ask(self.user_prompt, turns, topic=topic)
            if not line or line.upper() == END_MARK:
                break
            turns.append(Turn("user", text=line))
            note = self._ask(self.note_prompt, turns)
            if note.upper() == NO_NOTE:
                note = ""
            reply = self._ask(self.assistant_prompt, turns, reference=note)
            parts = [p.strip() for p in reply.split("||")]
            if note and len(parts) >= 2 and parts[0] and parts[1]:
                kw = keyword_hint if keyword_hint and keyword_hint.lower() in parts[1].lower() else None
                turns.append(Turn("model", lead=parts[0], body=parts[1],
                                  tail=parts[2] if len(parts) > 2 else "",
                                  reference=note, keyword=kw))
            else:
                turns.append(Turn("model", text=" ".join(p for p in parts if p)))
        if not turns:
            raise RoleplayError(f"{script_id}: the user role ended the conversation immediately")
        variant = "single_turn" if len(turns) == 2 else "v3"
        return ConversationScript(script_id, topic, variant, turns)
