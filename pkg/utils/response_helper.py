import json


def response_error(code: int, message: str, kind: str = None):
    error = {"code": code, "message": message}
    if kind:
        error["kind"] = kind
    return {"success": False, "data": None, "error": error}


def one_line(payload: dict) -> str:
    """Compact single-line JSON, safe for machine parsing"""
    return json.dumps(payload, separators=(",", ":"), default=str)
