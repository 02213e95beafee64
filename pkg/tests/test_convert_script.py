import subprocess
import sys
from pathlib import Path

from dupdetect.corpus import ingest

SCRIPT = Path(__file__).resolve().parents[1] / "scripts" / "convert_stackexchange.py"

POSTS = """<?xml version="1.0" encoding="utf-8"?>
<posts>
  <row Id="1" PostTypeId="1" CreationDate="2020-01-01T00:00:00.000" Title="Sort a dict by value"
       Body="&lt;p&gt;How do I sort?&lt;/p&gt;" Tags="&lt;python&gt;&lt;dictionary&gt;" />
  <row Id="2" PostTypeId="1" CreationDate="2020-02-01T00:00:00.000" Title="Sorting dicts [duplicate]"
       Body="&lt;p&gt;Same question.&lt;/p&gt;" Tags="|python|" />
  <row Id="3" PostTypeId="2" ParentId="1" Body="&lt;p&gt;Use sorted.&lt;/p&gt;" />
</posts>
"""

LINKS = """<?xml version="1.0" encoding="utf-8"?>
<postlinks>
  <row Id="10" PostId="2" RelatedPostId="1" LinkTypeId="3" />
  <row Id="11" PostId="2" RelatedPostId="1" LinkTypeId="1" />
  <row Id="12" PostId="2" RelatedPostId="99" LinkTypeId="3" />
</postlinks>
"""


def test_converts_questions_and_duplicate_links(tmp_path):
    (tmp_path / "Posts.xml").write_text(POSTS)
    (tmp_path / "PostLinks.xml").write_text(LINKS)
    proc = subprocess.run([sys.executable, str(SCRIPT), "--dump-dir", str(tmp_path), "--out-dir", str(tmp_path / "o")],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "o" / "pairs.csv").read_text() == "dup_id,orig_id\n2,1\n"
    corpus = ingest(tmp_path / "o" / "posts.jsonl", tmp_path / "o" / "pairs.csv")
    assert sorted(corpus.posts) == [1, 2]
    assert corpus.posts[2].title == "Sorting dicts" and corpus.posts[1].tags == ("python", "dictionary")
    assert corpus.posts[2].tags == ("python",)
