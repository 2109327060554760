/* Target-side instrumentation runtime, embedded verbatim into every
 * generated challenge source.
 *
 * Environment:
 *   FORKAWARE_SHM_ID     decimal SysV shared-memory id of the 65536-byte
 *                        edge-counter map; when absent, probes are no-ops
 *                        so the binaries run standalone.
 *   FORKAWARE_CRASHFILE  path of the crash-record file; when set, fatal
 *                        signals append one 16-byte record (pid as u64
 *                        little-endian, signal number as u64 little-endian)
 *                        and re-raise with the default disposition.
 *
 * The map and the record fd are inherited across fork, so every process
 * in the tree writes the same map and the same record file. The signal
 * handler performs only async-signal-safe work (stores, write, signal,
 * raise); a failed record write must never mask the crash itself.
 */
#ifndef CHALLENGE_RT_H
#define CHALLENGE_RT_H

#include <fcntl.h>
#include <signal.h>
#include <stdint.h>
#include <stdlib.h>
#include <string.h>
#include <sys/shm.h>
#include <sys/types.h>
#include <unistd.h>

#define FA_MAP_SIZE 65536u

static volatile unsigned char *fa_map;
static int fa_crash_fd = -1;

static void fa_probe(unsigned int edge)
{
    if (fa_map && edge < FA_MAP_SIZE && fa_map[edge] != 0xff)
        fa_map[edge]++;
}

static void fa_crash_handler(int sig)
{
    if (fa_crash_fd >= 0) {
        unsigned char rec[16];
        uint64_t pid = (uint64_t)getpid();
        uint64_t num = (uint64_t)sig;
        int i;
        for (i = 0; i < 8; i++) {
            rec[i] = (unsigned char)(pid >> (8 * i));
            rec[8 + i] = (unsigned char)(num >> (8 * i));
        }
        if (write(fa_crash_fd, rec, sizeof rec) < 0) {
            /* best effort only */
        }
    }
    signal(sig, SIG_DFL);
    raise(sig);
}

static void fa_runtime_init(void)
{
    const char *shm_id = getenv("FORKAWARE_SHM_ID");
    const char *crash_path = getenv("FORKAWARE_CRASHFILE");
    if (shm_id && *shm_id) {
        void *mem = shmat(atoi(shm_id), 0, 0);
        if (mem != (void *)-1)
            fa_map = (volatile unsigned char *)mem;
    }
    if (crash_path && *crash_path) {
        fa_crash_fd = open(crash_path, O_WRONLY | O_APPEND | O_CREAT, 0600);
        if (fa_crash_fd >= 0) {
            static const int fatal[] = { SIGSEGV, SIGABRT, SIGBUS, SIGFPE, SIGILL };
            struct sigaction sa;
            size_t i;
            memset(&sa, 0, sizeof sa);
            sa.sa_handler = fa_crash_handler;
            sigemptyset(&sa.sa_mask);
            for (i = 0; i < sizeof fatal / sizeof fatal[0]; i++)
                sigaction(fatal[i], &sa, 0);
        }
    }
}

#endif /* CHALLENGE_RT_H */
