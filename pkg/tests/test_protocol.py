import asyncio
import json
import re
import zlib

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pilotkit.errors import (
    ChecksumMismatch,
    DecodeError,
    InvalidField,
    MalformedJson,
    MissingField,
    UnknownType,
    VersionMismatch,
)
from pilotkit.model import TaskSpec
from pilotkit.protocol import (
    SCHEMAS,
    InMemoryChannel,
    Message,
    assign,
    decode,
    encode,
    make,
    read_message,
    write_message,
)

CRC_TAIL = re.compile(rb',"crc":"[0-9a-f]{8}"\}\n\Z')


def crc_frame(core: str) -> bytes:
    """Independent framing: append the CRC-32 of the core object."""
    crc = format(zlib.crc32(core.encode()), "08x")
    return (core[:-1] + f',"crc":"{crc}"' + "}\n").encode()


def test_register_frame_layout():
    frame = encode(make("Register", pilot_id="p1", cores=4, walltime_remaining=300))
    core = '{"v":1,"type":"Register","body":{"pilot_id":"p1","cores":4,"walltime_remaining":300}}'
    assert frame.startswith(core[:-1].encode())
    assert CRC_TAIL.search(frame)
    assert frame == crc_frame(core)


def test_nowork_frame_layout():
    frame = encode(make("NoWork"))
    assert frame == crc_frame('{"v":1,"type":"NoWork","body":{}}')


def test_body_fields_are_written_in_schema_order():
    msg = Message("Result", {"end": 2.0, "start": 1.0, "exit_code": 0, "task_id": "t"})
    assert list(msg.body) == ["task_id", "exit_code", "start", "end"]


def test_version_mismatch():
    with pytest.raises(VersionMismatch):
        decode(crc_frame('{"v":2,"type":"NoWork","body":{}}'))


def test_unknown_type():
    with pytest.raises(UnknownType):
        decode(crc_frame('{"v":1,"type":"Bogus","body":{}}'))


def test_truncated_line_is_malformed():
    frame = encode(make("NoWork"))
    with pytest.raises(MalformedJson):
        decode(frame[: len(frame) // 2])
    with pytest.raises(MalformedJson):
        decode(frame[:-1])


def test_missing_body_field_is_named():
    with pytest.raises(MissingField) as err:
        decode(crc_frame('{"v":1,"type":"Register","body":{"pilot_id":"p1","cores":4}}'))
    assert "walltime_remaining" in str(err.value)


def test_missing_checksum():
    with pytest.raises(MissingField):
        decode(b'{"v":1,"type":"NoWork","body":{}}\n')


def test_wrong_checksum():
    with pytest.raises(ChecksumMismatch):
        decode(b'{"v":1,"type":"NoWork","body":{},"crc":"00000000"}\n')


def test_non_canonical_spacing_is_rejected():
    frame = encode(make("NoWork")).replace(b'"v":1', b'"v": 1')
    with pytest.raises(MalformedJson):
        decode(frame)


def test_bad_field_types():
    with pytest.raises(InvalidField):
        make("Register", pilot_id="p1", cores=True, walltime_remaining=1)
    with pytest.raises(InvalidField):
        make("Heartbeat", pilot_id="p", state="Running", free_cores=1, extra=1)
    with pytest.raises(InvalidField):
        Message("Assign", {"task": {"task_id": "t"}})


def test_assign_carries_a_task_spec():
    spec = TaskSpec("t1", "/bin/echo", ("hi",), cores=2, estimated_duration=3.0)
    msg = decode(encode(assign(spec, attempt=2)))
    assert msg.task == spec and msg.body["attempt"] == 2


def test_in_memory_channel_uses_the_codec():
    ch = InMemoryChannel()
    ch.agent_send(make("TaskRequest", pilot_id="p", free_cores=2))
    ch.manager_send(make("Shutdown", reason="Released"))
    assert ch.manager_recv() == make("TaskRequest", pilot_id="p", free_cores=2)
    assert ch.agent_recv().body == {"reason": "Released"}
    assert ch.manager_recv() is None and ch.agent_recv() is None


def test_stream_transport_round_trip():
    async def run():
        received = []

        async def handle(reader, writer):
            while (msg := await read_message(reader)) is not None:
                received.append(msg)
            writer.close()

        server = await asyncio.start_server(handle, "127.0.0.1", 0)
        port = server.sockets[0].getsockname()[1]
        _, writer = await asyncio.open_connection("127.0.0.1", port)
        await write_message(writer, make("Heartbeat", pilot_id="p", state="Running", free_cores=3))
        await write_message(writer, make("NoWork"))
        writer.close()
        await writer.wait_closed()
        for _ in range(100):
            if len(received) == 2:
                break
            await asyncio.sleep(0.01)
        server.close()
        await server.wait_closed()
        return received

    got = asyncio.run(run())
    assert [m.type for m in got] == ["Heartbeat", "NoWork"]


# -- generated messages -----------------------------------------------------

text = st.text(st.characters(blacklist_categories=("Cs",)), max_size=12)
ints = st.integers(-(2**53), 2**53)
nums = st.one_of(ints, st.floats(allow_nan=False, allow_infinity=False))
task_specs = st.builds(
    TaskSpec,
    task_id=st.text(min_size=1, max_size=8),
    executable=st.text(min_size=1, max_size=8),
    arguments=st.lists(text, max_size=3).map(tuple),
    environment=st.dictionaries(st.text(min_size=1, max_size=4), text, max_size=2),
    cores=st.integers(1, 64),
    estimated_duration=st.floats(0.001, 1e6),
)
_value_for = {"str": text, "int": ints, "num": nums}


def _body(mtype):
    required, optional = SCHEMAS[mtype]
    fields = {}
    for name, kind in required:
        fields[name] = task_specs.map(TaskSpec.to_dict) if kind == "obj" else _value_for[kind]
    opt = {name: _value_for[kind] for name, kind in optional}
    return st.fixed_dictionaries(fields, optional=opt)


messages = st.sampled_from(sorted(SCHEMAS)).flatmap(lambda t: _body(t).map(lambda b: Message(t, b)))


@settings(max_examples=500, deadline=None)
@given(messages)
def test_round_trip(msg):
    frame = encode(msg)
    assert frame.endswith(b"\n") and frame.count(b"\n") == 1
    assert list(json.loads(frame)) == ["v", "type", "body", "crc"]
    assert decode(frame) == msg


def mutate(frame: bytes, data) -> bytes:
    kind = data.draw(st.sampled_from(["flip", "replace", "insert", "delete", "truncate"]))
    i = data.draw(st.integers(0, len(frame) - 1))
    b = bytearray(frame)
    if kind == "flip":
        b[i] ^= 1 << data.draw(st.integers(0, 7))
    elif kind == "replace":
        b[i] = data.draw(st.integers(0, 255).filter(lambda x: x != frame[i]))
    elif kind == "insert":
        b.insert(i, data.draw(st.integers(0, 255)))
    elif kind == "delete":
        del b[i]
    else:
        del b[i:]
    return bytes(b)


@settings(max_examples=500, deadline=None)
@given(messages, st.data())
def test_corrupted_frames_never_decode(msg, data):
    frame = encode(msg)
    bad = mutate(frame, data)
    assert bad != frame
    with pytest.raises(DecodeError):
        decode(bad)
