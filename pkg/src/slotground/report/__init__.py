from .schema import (FIELDS, LocationSpec, ParseResult, Report, Violation, parse_location, parse_report,
                     render_report, validate_report)
from .text import (TEMPLATES, init_text_embedding, pooling_matrix, render_reasoning, report_tokens,
                   text_feature, text_vocab, tokenize)
from .rouge import lcs_length, rouge_l, rouge_l_tokens
from .policy import (HEADS, ReportPolicy, actions_from_report, decode_report, gather_log_prob,
                     lora_apply, render_actions)
