/* genchallenge: emit one self-contained, compilable challenge program.
 *
 *   genchallenge A|B|C [-d fork_depth] [-c conditionals] [-l child|grandchild]
 *                [-o outfile]
 *
 * Kinds:
 *   A  fork chain; every descendant raises SIGSEGV after reaping its own
 *      child; the root waits and exits 0.
 *   B  fork chain; the root exits without waiting. With -l child (default)
 *      every descendant forks the next link and then spins forever; with
 *      -l grandchild the intermediates exit unwaited, so only the deepest,
 *      orphaned process spins.
 *   C  fork chain; the deepest child reads one input byte per conditional
 *      from stdin (missing bytes read as 0) and hits the odd or even arm
 *      probe of each conditional by the byte's parity; ancestors wait.
 *
 * Probe numbering (shared with the monitor): process at depth d hits entry
 * probe 1+d, except the deepest child of kind C, whose only probes are the
 * conditional arms 10+2*i (even) / 10+2*i+1 (odd). Output is deterministic
 * for equal parameters.
 */

#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "rt_embed.h"

#define MAX_DEPTH 8
#define MAX_CONDITIONALS 16
#define ARM_BASE 10

struct params {
    char kind;
    int fork_depth;
    int conditionals;
    int loop_in_grandchild;
};

static void usage(FILE *to)
{
    fputs(
        "usage: genchallenge A|B|C [-d fork_depth(1..8)] [-c conditionals(1..16)]\n"
        "                    [-l child|grandchild] [-o outfile]\n",
        to);
}

static void die(const char *msg)
{
    fprintf(stderr, "genchallenge: %s\n", msg);
    exit(2);
}

static void ind(FILE *f, int level)
{
    int i;
    for (i = 0; i < level; i++)
        fputs("    ", f);
}

static int entry_edge(int depth)
{
    return 1 + depth;
}

/* Code for the process at `depth`; emitted inside `in` indent levels.
 * Every non-root block ends in its own termination so children never fall
 * through into ancestor code. */
static void emit_level(FILE *f, const struct params *p, int depth, int in)
{
    int deepest = depth == p->fork_depth;
    int i;

    if (!(p->kind == 'C' && deepest)) {
        ind(f, in);
        fprintf(f, "fa_probe(%d);\n", entry_edge(depth));
    }

    if (p->kind == 'A') {
        if (!deepest) {
            ind(f, in);
            fputs("if (fork() == 0) { /* child */\n", f);
            emit_level(f, p, depth + 1, in + 1);
            ind(f, in);
            fputs("} else { /* parent */\n", f);
            ind(f, in + 1);
            fputs("wait(NULL); /* wait for child termination */\n", f);
            ind(f, in);
            fputs("}\n", f);
        }
        if (depth > 0) {
            ind(f, in);
            fputs("raise(SIGSEGV); /* simulated crash */\n", f);
            ind(f, in);
            fputs("_exit(0);\n", f);
        }
    } else if (p->kind == 'B') {
        if (!deepest) {
            ind(f, in);
            fputs("if (fork() == 0) { /* child */\n", f);
            emit_level(f, p, depth + 1, in + 1);
            ind(f, in);
            fputs("}\n", f);
        }
        if (depth > 0) {
            if (deepest || !p->loop_in_grandchild) {
                ind(f, in);
                fputs("for (;;) { ; } /* blocking code */\n", f);
            } else {
                ind(f, in);
                fputs("_exit(0); /* exits without waiting */\n", f);
            }
        }
    } else { /* C */
        if (!deepest) {
            ind(f, in);
            fputs("if (fork() == 0) { /* child */\n", f);
            emit_level(f, p, depth + 1, in + 1);
            ind(f, in);
            fputs("} else { /* parent */\n", f);
            ind(f, in + 1);
            fputs("wait(NULL); /* wait for child termination */\n", f);
            ind(f, in);
            fputs("}\n", f);
            if (depth > 0) {
                ind(f, in);
                fputs("_exit(0);\n", f);
            }
        } else {
            ind(f, in);
            fprintf(f, "unsigned char data[%d];\n", p->conditionals);
            ind(f, in);
            fputs("size_t got = 0;\n", f);
            ind(f, in);
            fputs("memset(data, 0, sizeof data);\n", f);
            ind(f, in);
            fputs("while (got < sizeof data) {\n", f);
            ind(f, in + 1);
            fputs("ssize_t n = read(0, data + got, sizeof data - got);\n", f);
            ind(f, in + 1);
            fputs("if (n <= 0)\n", f);
            ind(f, in + 2);
            fputs("break;\n", f);
            ind(f, in + 1);
            fputs("got += (size_t)n;\n", f);
            ind(f, in);
            fputs("}\n", f);
            for (i = 0; i < p->conditionals; i++) {
                ind(f, in);
                fprintf(f,
                        "if (data[%d] %% 2) { fa_probe(%d); } else { fa_probe(%d); }\n",
                        i, ARM_BASE + 2 * i + 1, ARM_BASE + 2 * i);
            }
            ind(f, in);
            fputs("_exit(0);\n", f);
        }
    }
}

static void emit_program(FILE *f, const struct params *p)
{
    fprintf(f,
            "/* Challenge %c: generated forking target (fork_depth=%d",
            p->kind, p->fork_depth);
    if (p->kind == 'C')
        fprintf(f, ", conditionals=%d", p->conditionals);
    if (p->kind == 'B')
        fprintf(f, ", loop_in=%s", p->loop_in_grandchild ? "grandchild" : "child");
    fputs("). */\n\n#include <sys/wait.h>\n\n", f);
    fputs(RT_SOURCE, f);
    fputs("\nint main(void)\n{\n    fa_runtime_init();\n", f);
    emit_level(f, p, 0, 1);
    fputs("    return 0;\n}\n", f);
}

int main(int argc, char **argv)
{
    struct params p;
    const char *outfile = NULL;
    FILE *out = stdout;
    int i;

    if (argc < 2) {
        usage(stderr);
        return 2;
    }
    if (strlen(argv[1]) != 1 || !strchr("ABC", argv[1][0])) {
        usage(stderr);
        die("kind must be A, B or C");
    }
    p.kind = argv[1][0];
    p.fork_depth = 1;
    p.conditionals = 4;
    p.loop_in_grandchild = 0;

    for (i = 2; i < argc; i++) {
        if (strcmp(argv[i], "-d") == 0 && i + 1 < argc) {
            p.fork_depth = atoi(argv[++i]);
        } else if (strcmp(argv[i], "-c") == 0 && i + 1 < argc) {
            p.conditionals = atoi(argv[++i]);
        } else if (strcmp(argv[i], "-l") == 0 && i + 1 < argc) {
            i++;
            if (strcmp(argv[i], "grandchild") == 0)
                p.loop_in_grandchild = 1;
            else if (strcmp(argv[i], "child") != 0)
                die("-l takes child or grandchild");
        } else if (strcmp(argv[i], "-o") == 0 && i + 1 < argc) {
            outfile = argv[++i];
        } else {
            usage(stderr);
            die("unknown argument");
        }
    }
    if (p.fork_depth < 1 || p.fork_depth > MAX_DEPTH)
        die("fork_depth outside 1..8");
    if (p.conditionals < 1 || p.conditionals > MAX_CONDITIONALS)
        die("conditionals outside 1..16");
    if (p.kind == 'B' && p.loop_in_grandchild && p.fork_depth < 2)
        die("-l grandchild needs -d >= 2");

    if (outfile) {
        out = fopen(outfile, "w");
        if (!out)
            die("cannot open output file");
    }
    emit_program(out, &p);
    if (out != stdout && fclose(out) != 0)
        die("write failed");
    return 0;
}
